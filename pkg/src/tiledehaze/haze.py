"""Synthetic haze generation with the atmospheric scattering model.

hazy = clear * t + A * (1 - t), with a procedurally generated smooth
transmission field t. Fields come from multi-octave value noise shaped
so a requested fraction of pixels falls below the hazy threshold
(t < 0.9) and the field floor drops with the intensity knob. Everything
is deterministic per seed, so a manifest of (clear path, seed, params)
regenerates the exact same hazy images byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .image import ImageTensor, load_image, save_image

log = logging.getLogger(__name__)

T_MIN = 0.05          # transmission floor; full occlusion loses all signal
HAZY_THRESHOLD = 0.9  # pixels with t below this count as haze-covered


@dataclass(frozen=True)
class HazeParams:
    airlight: np.ndarray        # per-channel intensity in [0, 1]
    transmission: np.ndarray    # (H, W) field in [T_MIN, 1]
    coverage: float
    intensity: float
    seed: int

    def __post_init__(self):
        if not np.isfinite(self.airlight).all():
            raise DataError("airlight must be finite")
        t = self.transmission
        if t.ndim != 2 or not np.isfinite(t).all():
            raise DataError("transmission must be a finite 2-d field")
        # generated fields respect T_MIN; hand-built fields may use the full
        # [0, 1] range (t == 0 is total occlusion: hazy == airlight)
        if t.min() < 0.0 or t.max() > 1.0 + 1e-6:
            raise DataError(f"transmission must lie in [0, 1], got [{t.min()}, {t.max()}]")

    @classmethod
    def sample(cls, height: int, width: int, coverage: float, intensity: float, seed: int) -> "HazeParams":
        """Draw airlight and a transmission field deterministically from seed."""
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        base = rng.uniform(0.8, 1.0)
        jitter = rng.uniform(-0.02, 0.02, size=3)   # haze is bright and near-achromatic
        airlight = np.clip(base + jitter, 0.0, 1.0).astype(np.float32)
        t = generate_transmission(height, width, coverage, intensity, seed)
        return cls(airlight=airlight, transmission=t, coverage=coverage, intensity=intensity, seed=seed)


def value_noise(height: int, width: int, seed: int, base_cells: int = 4,
                octaves: int = 5, persistence: float = 0.5) -> np.ndarray:
    """Multi-octave smoothstep-interpolated value noise, normalized to [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    out = np.zeros((height, width), dtype=np.float64)
    amp = 1.0
    for o in range(octaves):
        cells = base_cells * 2**o
        lattice = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0.0, cells, height, endpoint=False)
        xs = np.linspace(0.0, cells, width, endpoint=False)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        fy = ys - y0
        fx = xs - x0
        sy = (fy * fy * (3 - 2 * fy))[:, None]
        sx = (fx * fx * (3 - 2 * fx))[None, :]
        v00 = lattice[np.ix_(y0, x0)]
        v01 = lattice[np.ix_(y0, x0 + 1)]
        v10 = lattice[np.ix_(y0 + 1, x0)]
        v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
        top = v00 + (v01 - v00) * sx
        bot = v10 + (v11 - v10) * sx
        out += amp * (top + (bot - top) * sy)
        amp *= persistence
    lo, hi = out.min(), out.max()
    if hi - lo < 1e-12:
        return np.full((height, width), 0.5, dtype=np.float32)
    return ((out - lo) / (hi - lo)).astype(np.float32)


def generate_transmission(height: int, width: int, coverage: float,
                          intensity: float, seed: int) -> np.ndarray:
    """Smooth transmission field with calibrated coverage.

    The fraction of pixels with t < HAZY_THRESHOLD tracks `coverage`
    (quantile shaping of the noise field) and min(t) drops monotonically
    with `intensity`, bottoming out at T_MIN.
    """
    if not (0.0 <= coverage <= 1.0 and 0.0 <= intensity <= 1.0):
        raise DataError(f"coverage and intensity must lie in [0, 1], got {coverage}, {intensity}")
    if coverage == 0.0:
        return np.ones((height, width), dtype=np.float32)

    noise = value_noise(height, width, seed).astype(np.float64)
    floor = HAZY_THRESHOLD - intensity * (HAZY_THRESHOLD - T_MIN)
    q = float(np.quantile(noise, coverage))
    below = noise < q
    t = np.empty_like(noise)
    t[below] = floor + (HAZY_THRESHOLD - floor) * noise[below] / max(q, 1e-9)
    t[~below] = HAZY_THRESHOLD + (1.0 - HAZY_THRESHOLD) * (noise[~below] - q) / max(1.0 - q, 1e-9)
    return np.clip(t, T_MIN, 1.0).astype(np.float32)


def synthesize_haze(clear: ImageTensor, params: HazeParams) -> ImageTensor:
    """Composite haze over a clear image; output clamped to [0, 1]."""
    t = params.transmission
    if t.shape != (clear.height, clear.width):
        raise DataError(
            f"transmission field {t.shape} does not match image {clear.height}x{clear.width}")
    a = np.asarray(params.airlight, dtype=np.float32).reshape(1, 1, -1)
    if a.shape[2] not in (1, clear.channels):
        raise DataError(f"airlight has {a.shape[2]} channels, image has {clear.channels}")
    if a.shape[2] != clear.channels:
        a = np.repeat(a, clear.channels, axis=2)
    t3 = t[:, :, None].astype(np.float32)
    hazy = clear.data * t3 + a * (1.0 - t3)
    return ImageTensor(np.clip(hazy, 0.0, 1.0))


def hazy_from_record(record: dict, root: Path | None = None) -> ImageTensor:
    """Regenerate the hazy image a manifest record describes."""
    clear_path = Path(record["clear"])
    if root is not None and not clear_path.is_absolute():
        clear_path = root / clear_path
    clear = load_image(clear_path)
    params = HazeParams.sample(clear.height, clear.width,
                               record["coverage"], record["intensity"], record["seed"])
    return synthesize_haze(clear, params)


def build_dataset_manifest(
    clear_dir,
    out_dir,
    split_ratio: float = 0.8,
    seed: int = 0,
    coverage_range: tuple[float, float] = (0.3, 1.0),
    intensity_range: tuple[float, float] = (0.3, 1.0),
) -> Path:
    """Synthesize a hazy partner for every readable clear image and write a
    line-delimited manifest enabling exact regeneration.

    Each line is a JSON record: clear path, hazy path, split, seed,
    airlight, coverage, intensity. Unreadable images are skipped with a
    logged warning; an empty input directory is an error.
    """
    clear_dir = Path(clear_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in clear_dir.iterdir()
                   if p.suffix.lower() in (".png", ".tif", ".tiff"))
    if not files:
        raise DataError(f"no PNG/TIFF images found in {clear_dir}")

    master = np.random.default_rng(seed)
    records = []
    for path in files:
        pair_seed = int(master.integers(0, 2**31 - 1))
        coverage = float(master.uniform(*coverage_range))
        intensity = float(master.uniform(*intensity_range))
        try:
            clear = load_image(path)
        except (DataError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        params = HazeParams.sample(clear.height, clear.width, coverage, intensity, pair_seed)
        hazy = synthesize_haze(clear, params)
        hazy_path = out_dir / f"{path.stem}_hazy.png"
        save_image(hazy, hazy_path)
        records.append({
            "clear": str(path),
            "hazy": str(hazy_path),
            "seed": pair_seed,
            "airlight": [float(x) for x in params.airlight],
            "coverage": coverage,
            "intensity": intensity,
        })
    if not records:
        raise DataError(f"no readable images in {clear_dir}")

    n_train = int(round(split_ratio * len(records)))
    for i, rec in enumerate(records):
        rec["split"] = "train" if i < n_train else "test"

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records
