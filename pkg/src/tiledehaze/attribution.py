"""Attribution maps for dehazing: path-integrated gradients of a regional
intensity detector.

The detector is the summed output intensity over a square window. The
attribution of each input pixel is the integral of the detector's
gradient along a straight path from a baseline image (the clear image,
whose reconstruction is easy) to the hazy input. Two step weightings are
available: "riemann" (default), the standard right-endpoint Riemann sum
whose attributions sum to the detector's change between the endpoints,
and "as-printed", which weights every step by the backward path
difference divided once more by the step count (a 1/m^2 per-step
factor), kept for fidelity with the published discrete form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .image import ImageTensor, save_image

STEP_WEIGHTINGS = ("riemann", "as-printed")


@dataclass(frozen=True)
class AttributionRegion:
    """Square detector window: top-left (x, y) in pixels, side length l.

    x is the column coordinate, y the row; the window covers columns
    [x, x+l) and rows [y, y+l).
    """

    x: int
    y: int
    l: int

    def validate(self, height: int, width: int) -> None:
        if self.l < 1:
            raise DataError(f"window side must be >= 1, got {self.l}")
        if self.x < 0 or self.y < 0 or self.x + self.l > width or self.y + self.l > height:
            raise DataError(
                f"region ({self.x},{self.y},{self.l}) lies outside a {height}x{width} image")


@dataclass(frozen=True)
class DamConfig:
    steps: int = 100
    step_weighting: str = "riemann"
    per_channel: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise DataError(f"steps must be >= 1, got {self.steps}")
        if self.step_weighting not in STEP_WEIGHTINGS:
            raise DataError(f"step_weighting must be one of {STEP_WEIGHTINGS}")


@dataclass
class AttributionMap:
    """Signed per-pixel contribution scores plus run metadata."""

    scores: np.ndarray  # (H, W) or (H, W, C) in per-channel mode
    region: AttributionRegion
    steps: int
    step_weighting: str
    model_checksum: str = ""

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise DataError("attribution map contains non-finite values")


def detector_response(image: ImageTensor | torch.Tensor, region: AttributionRegion) -> float | torch.Tensor:
    """Sum of intensities over the window (all channels).

    Accepts a torch tensor to stay differentiable inside the integration
    loop; returns a python float for plain images.
    """
    if isinstance(image, ImageTensor):
        region.validate(image.height, image.width)
        window = image.data[region.y : region.y + region.l, region.x : region.x + region.l, :]
        return float(np.sum(window, dtype=np.float64))
    region.validate(image.shape[0], image.shape[1])
    return image[region.y : region.y + region.l, region.x : region.x + region.l, :].sum()


def model_checksum(model) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def compute_dam(
    model,
    hazy: ImageTensor,
    baseline: ImageTensor,
    region: AttributionRegion,
    cfg: DamConfig = DamConfig(),
) -> AttributionMap:
    """Integrate detector gradients along the straight path baseline -> hazy.

    Steps are evaluated at k/m for k = 1..m and accumulated in a fixed
    order, so the result is deterministic. The model is evaluated through
    the full tiled pipeline (gradients flow through the bottleneck).
    """
    if hazy.data.shape != baseline.data.shape:
        raise DataError(
            f"hazy {hazy.data.shape} and baseline {baseline.data.shape} shapes differ")
    region.validate(hazy.height, hazy.width)

    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    x1 = torch.from_numpy(hazy.data).to(device=device, dtype=dtype)
    x0 = torch.from_numpy(baseline.data).to(device=device, dtype=dtype)
    delta = x1 - x0
    m = cfg.steps

    total = torch.zeros_like(x0, dtype=torch.float64)
    for k in range(1, m + 1):
        point = (x0 + (k / m) * delta).detach().requires_grad_(True)
        output = model.forward_image(point)
        score = detector_response(output, region)
        if not score.requires_grad:
            raise DataError("model output does not carry gradients; pipeline must be differentiable")
        (grad,) = torch.autograd.grad(score, point)
        total = total + grad.to(torch.float64)

    if cfg.step_weighting == "riemann":
        # sum_k grad_k * (hazy - baseline) / m
        scores = total * (delta.to(torch.float64) / m)
    else:
        # as printed: per-step factor is the backward difference
        # gamma(k/m) - gamma((k+1)/m) = -(hazy - baseline)/m, divided by m again
        scores = total * (-(delta.to(torch.float64)) / (m * m))

    arr = scores.detach().cpu().numpy()
    if not cfg.per_channel:
        arr = arr.sum(axis=2)
    return AttributionMap(scores=arr, region=region, steps=m,
                          step_weighting=cfg.step_weighting,
                          model_checksum=model_checksum(model))


def _diverging_colors(norm: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to a blue-white-red ramp, (H, W) -> (H, W, 3)."""
    pos = np.clip(norm, 0.0, 1.0)
    neg = np.clip(-norm, 0.0, 1.0)
    r = 1.0 - neg
    g = 1.0 - np.maximum(pos, neg)
    b = 1.0 - pos
    return np.stack([r, g, b], axis=2)


def render_heatmap(
    attribution: AttributionMap,
    underlay: ImageTensor,
    out_path,
    alpha: float = 0.55,
) -> None:
    """Write a diverging-colormap overlay PNG with the region outlined.

    Scores are normalized by their maximum magnitude, so the strongest
    pixel always renders at a colormap extreme; a zero map renders as a
    neutral overlay.
    """
    scores = attribution.scores
    if scores.ndim == 3:
        scores = scores.sum(axis=2)
    if scores.shape != (underlay.height, underlay.width):
        raise DataError(f"map {scores.shape} does not match underlay "
                        f"{underlay.height}x{underlay.width}")
    peak = float(np.abs(scores).max())
    norm = scores / peak if peak > 0 else np.zeros_like(scores)
    heat = _diverging_colors(norm)

    gray = underlay.data.mean(axis=2, keepdims=True)
    base = np.repeat(gray, 3, axis=2)
    overlay = (1.0 - alpha) * base + alpha * heat

    r = attribution.region
    outline = np.array([0.0, 0.9, 0.0], dtype=np.float64)  # green; red is heat
    x0, x1 = r.x, min(r.x + r.l, overlay.shape[1]) - 1
    y0, y1 = r.y, min(r.y + r.l, overlay.shape[0]) - 1
    overlay[y0, x0 : x1 + 1] = outline
    overlay[y1, x0 : x1 + 1] = outline
    overlay[y0 : y1 + 1, x0] = outline
    overlay[y0 : y1 + 1, x1] = outline

    save_image(ImageTensor.from_array(overlay.astype(np.float32), clamp=True), out_path)


def save_attribution(attribution: AttributionMap, prefix) -> dict[str, str]:
    """Write the raw map (.npy), and a JSON sidecar; returns the paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    raw_path = prefix.with_suffix(".npy")
    np.save(raw_path, attribution.scores)
    sidecar = {
        "region": {"x": attribution.region.x, "y": attribution.region.y, "l": attribution.region.l},
        "steps": attribution.steps,
        "step_weighting": attribution.step_weighting,
        "model_checksum": attribution.model_checksum,
    }
    sidecar_path = prefix.with_suffix(".json")
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return {"raw": str(raw_path), "sidecar": str(sidecar_path)}
