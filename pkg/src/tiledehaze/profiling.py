"""Per-stage peak-memory and timing profiler.

On CUDA devices the meter reads the allocator's high-water-mark counter,
reset at each stage boundary. On CPU-only hosts there is no allocator
counter, so the meter installs a dispatch-mode observer that follows
every tensor the compute graph allocates and frees, maintaining the
live-byte total and its per-stage peak — the same quantity the CUDA
counter reports, measured the only way available without a device.
Host-staged numpy buffers intentionally live outside this pool; process
RSS is reported separately as host memory.
"""

from __future__ import annotations

import resource
import time
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils._python_dispatch import TorchDispatchMode
from torch.utils._pytree import tree_map

from .image import ImageTensor


class _LiveTensorTracker(TorchDispatchMode):
    """Tracks live bytes of every tensor storage created under the mode."""

    def __init__(self):
        super().__init__()
        self.live = 0
        self.peak = 0        # resettable, for per-stage windows
        self.high_water = 0  # never reset: run-wide maximum
        self._refs: dict[int, list[int]] = {}  # storage cdata -> [refcount, nbytes]

    def note_existing(self, nbytes: int) -> None:
        """Charge tensors allocated before the mode was entered (weights)."""
        self.live += nbytes
        self.peak = max(self.peak, self.live)
        self.high_water = max(self.high_water, self.live)

    def reset_peak(self) -> None:
        self.peak = self.live

    def _track(self, t) -> None:
        if not isinstance(t, torch.Tensor):
            return
        storage = t.untyped_storage()
        nbytes = storage.nbytes()
        if nbytes == 0:
            return
        key = storage._cdata
        entry = self._refs.get(key)
        if entry is None:
            entry = [0, nbytes]
            self._refs[key] = entry
            self.live += nbytes
            if self.live > self.peak:
                self.peak = self.live
            if self.live > self.high_water:
                self.high_water = self.live
        entry[0] += 1

        def on_free(key=key):
            e = self._refs.get(key)
            if e is None:
                return
            e[0] -= 1
            if e[0] <= 0:
                self.live -= e[1]
                del self._refs[key]

        weakref.finalize(t, on_free)

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        tree_map(self._track, out)
        return out


def module_parameter_bytes(module: torch.nn.Module) -> int:
    total = 0
    seen = set()
    for t in list(module.parameters()) + list(module.buffers()):
        key = t.untyped_storage()._cdata
        if key not in seen:
            seen.add(key)
            total += t.untyped_storage().nbytes()
    return total


class MemoryMeter:
    """Records the peak device-tensor footprint of each pipeline stage.

    Use as a context manager around the run, with `stage(name)` around
    each phase. `peaks` maps stage name to peak bytes; `overall_peak` is
    the run-wide high-water mark.
    """

    def __init__(self, device: str = "cpu", static_bytes: int = 0):
        self.device = torch.device(device)
        self.static_bytes = static_bytes
        self.peaks: dict[str, int] = {}
        self._tracker: _LiveTensorTracker | None = None
        self.overall_peak = 0

    def __enter__(self):
        if self.device.type != "cuda":
            self._tracker = _LiveTensorTracker()
            self._tracker.note_existing(self.static_bytes)
            self._tracker.__enter__()
        else:
            torch.cuda.reset_peak_memory_stats(self.device)
        return self

    def __exit__(self, *exc):
        if self._tracker is not None:
            self._tracker.__exit__(*exc)
            self.overall_peak = self._tracker.high_water
        else:
            self.overall_peak = torch.cuda.max_memory_allocated(self.device)
        return False

    @contextmanager
    def stage(self, name: str):
        if self._tracker is not None:
            import gc

            gc.collect()  # flush cycles so frees land in the right stage
            self._tracker.reset_peak()
            yield
            gc.collect()
            peak = self._tracker.peak
        else:
            torch.cuda.synchronize(self.device)
            torch.cuda.reset_peak_memory_stats(self.device)
            yield
            torch.cuda.synchronize(self.device)
            peak = torch.cuda.max_memory_allocated(self.device)
        self.peaks[name] = max(self.peaks.get(name, 0), int(peak))


def host_peak_bytes() -> int:
    """Process-wide resident high-water mark (ru_maxrss is kB on Linux)."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass
class ProfileEntry:
    height: int
    width: int
    precision: str
    seconds: float
    stage_peaks: dict[str, int]
    overall_peak: int
    error: str | None = None


@dataclass
class ProfileReport:
    entries: list[ProfileEntry] = field(default_factory=list)
    host_peak: int = 0

    def to_text(self) -> str:
        lines = [f"{'size':<14} {'precision':<9} {'seconds':>9} {'peak_bytes':>14}  stages"]
        for e in self.entries:
            stages = ", ".join(f"{k}={v}" for k, v in e.stage_peaks.items())
            status = f"ERROR: {e.error}" if e.error else stages
            lines.append(f"{e.height}x{e.width:<8} {e.precision:<9} {e.seconds:>9.3f} "
                         f"{e.overall_peak:>14}  {status}")
        lines.append(f"host peak = {self.host_peak} bytes")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        import csv

        stages = sorted({s for e in self.entries for s in e.stage_peaks})
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["height", "width", "precision", "seconds", "overall_peak",
                             *[f"peak_{s}" for s in stages], "error"])
            for e in self.entries:
                writer.writerow([e.height, e.width, e.precision, e.seconds, e.overall_peak,
                                 *[e.stage_peaks.get(s, "") for s in stages], e.error or ""])


def profile_run(model, sizes, precision: str = "fp32", mini_batch_size=None, seed: int = 0) -> ProfileReport:
    """Measure per-stage peak memory and wall time of inference at each
    image size. Out-of-memory results are recorded as entries, not raised.
    """
    from .errors import StageMemoryError
    from .model import dehaze

    report = ProfileReport()
    device = str(next(model.parameters()).device)
    for h, w in sizes:
        rng = np.random.default_rng(seed)
        image = ImageTensor(rng.random((h, w, model.config.encoder.in_channels), dtype=np.float32))
        meter = MemoryMeter(device=device, static_bytes=module_parameter_bytes(model))
        start = time.perf_counter()
        error = None
        try:
            with meter:
                dehaze(image, model, mini_batch_size=mini_batch_size, precision=precision, meter=meter)
        except StageMemoryError as exc:
            error = str(exc)
        elapsed = time.perf_counter() - start
        report.entries.append(ProfileEntry(h, w, precision, elapsed, dict(meter.peaks),
                                           meter.overall_peak, error))
    report.host_peak = host_peak_bytes()
    return report


def expected_retained_bytes(config, height: int, width: int, precision: str = "fp32") -> dict[str, int]:
    """Analytic lower bound on what inference must keep resident, per stage.

    Retained tensors are the ones that grow with image size: the token
    sequence, and the bottleneck's linear working set in approximate mode
    (quadratic in exact mode). Per-mini-batch transients are excluded —
    they are the patch-count-independent part.
    """
    from .tiling import compute_layout

    enc = config.encoder.resolved()
    bn = config.bottleneck
    itemsize = 2 if precision == "fp16" else 4
    layout = compute_layout(height, width, enc.patch_size)
    n_patches = layout.num_patches
    ts = enc.token_spatial
    d = enc.token_dim
    n_tokens = n_patches * ts * ts

    tokens = n_tokens * d * itemsize
    if bn is not None and bn.attention_mode == "approximate":
        b = bn.approx.block_size
        r = bn.approx.low_rank
        per_head = n_tokens * (b + r)               # block logits + landmark logits
        attn = bn.num_heads * per_head * itemsize
    else:
        heads = bn.num_heads if bn is not None else 1
        attn = heads * n_tokens * n_tokens * itemsize
    ffn_ratio = bn.ffn_ratio if bn is not None else 4.0
    ffn = int(n_tokens * d * ffn_ratio * itemsize)
    return {
        "tokens": tokens,
        "bottleneck_attention": attn,
        "bottleneck_ffn": ffn,
        "total": tokens * 3 + attn + ffn,           # x3: qkv split alongside the sequence
    }
