"""Per-patch encoder: maps each patch to a compact token map plus a
pyramid of skip features, processing patches in sequential mini-batches.

Peak memory of the encoder is set by the mini-batch size, not by how
many patches the image produced: only the tokens (the bottleneck input)
stay on the compute device, while skip features are staged to host
memory as each mini-batch finishes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .backbone import PatchMerging, init_backbone_weights, make_stage
from .errors import ConfigError, DataError
from .tiling import PatchBatch

# width / depth / head presets for the windowed-attention family
_PRESETS = {
    "windowed-t": dict(embed_dim=96, stage_depths=(2, 2, 6, 2), num_heads=(3, 6, 12, 24)),
    "windowed-s": dict(embed_dim=96, stage_depths=(2, 2, 18, 2), num_heads=(3, 6, 12, 24)),
    "windowed-b": dict(embed_dim=128, stage_depths=(2, 2, 18, 2), num_heads=(4, 8, 16, 32)),
    "windowed-l": dict(embed_dim=192, stage_depths=(2, 2, 18, 2), num_heads=(6, 12, 24, 48)),
    "cnn-t": dict(embed_dim=64, stage_depths=(2, 2, 2, 2), num_heads=(1, 1, 1, 1)),
    "cnn-b": dict(embed_dim=96, stage_depths=(3, 3, 3, 3), num_heads=(1, 1, 1, 1)),
}


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "windowed-t"
    patch_size: int = 256
    in_channels: int = 3
    embed_dim: int | None = None        # None: take from the backbone preset
    stage_depths: tuple[int, ...] | None = None
    num_heads: tuple[int, ...] | None = None
    embed_stride: int = 4               # patch-embed downsample factor
    window_size: int = 8
    mini_batch_size: int = 4
    mlp_ratio: float = 4.0
    rel_bias_hidden: int = 32           # width of the relative-position bias MLP

    def resolved(self) -> "EncoderConfig":
        """Fill preset-derived fields so all dims are explicit."""
        if self.backbone not in _PRESETS:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choices: {sorted(_PRESETS)}")
        preset = _PRESETS[self.backbone]
        out = self
        if out.embed_dim is None:
            out = replace(out, embed_dim=preset["embed_dim"])
        if out.stage_depths is None:
            out = replace(out, stage_depths=tuple(preset["stage_depths"]))
        if out.num_heads is None:
            heads = preset["num_heads"][: len(out.stage_depths)]
            if len(heads) < len(out.stage_depths):
                heads = heads + (heads[-1],) * (len(out.stage_depths) - len(heads))
            out = replace(out, num_heads=tuple(heads))
        return out

    @property
    def stage_kind(self) -> str:
        return "cnn" if self.backbone.startswith("cnn") else "windowed"

    @property
    def num_stages(self) -> int:
        return len(self.resolved().stage_depths)

    @property
    def downsample_factor_total(self) -> int:
        return self.embed_stride * 2 ** (self.num_stages - 1)

    @property
    def token_spatial(self) -> int:
        return self.patch_size // self.downsample_factor_total

    @property
    def token_dim(self) -> int:
        return self.resolved().embed_dim * 2 ** (self.num_stages - 1)

    def stage_dims(self) -> list[int]:
        c = self.resolved().embed_dim
        return [c * 2**i for i in range(self.num_stages)]

    def stage_spatials(self) -> list[int]:
        r = self.patch_size // self.embed_stride
        return [r // 2**i for i in range(self.num_stages)]


def validate_config(cfg: EncoderConfig) -> list[str]:
    """Report (not raise) every divisibility/positivity violation."""
    violations = []
    try:
        cfg = cfg.resolved()
    except ConfigError as exc:
        return [str(exc)]
    if cfg.mini_batch_size < 1:
        violations.append(f"mini_batch_size must be >= 1, got {cfg.mini_batch_size}")
    if cfg.patch_size < 16:
        violations.append(f"patch_size must be >= 16, got {cfg.patch_size}")
    if cfg.embed_stride < 1:
        violations.append(f"embed_stride must be >= 1, got {cfg.embed_stride}")
    if cfg.in_channels not in (1, 3):
        violations.append(f"in_channels must be 1 or 3, got {cfg.in_channels}")
    total = cfg.downsample_factor_total
    if cfg.patch_size % total != 0:
        violations.append(
            f"patch_size {cfg.patch_size} not divisible by total downsample factor {total}")
    elif cfg.patch_size // total < 1:
        violations.append("token spatial size collapsed below 1")
    if len(cfg.num_heads) != len(cfg.stage_depths):
        violations.append("num_heads and stage_depths must have one entry per stage")
    for dim, heads in zip(cfg.stage_dims(), cfg.num_heads):
        if dim % heads != 0:
            violations.append(f"stage dim {dim} not divisible by its head count {heads}")
    if any(d < 1 for d in cfg.stage_depths):
        violations.append("every stage depth must be >= 1")
    if cfg.stage_kind == "windowed" and cfg.patch_size % total == 0:
        for r in cfg.stage_spatials():
            ws = min(cfg.window_size, r)
            if ws >= 1 and r % ws != 0:
                violations.append(
                    f"stage resolution {r} not divisible by effective window {ws}")
    return violations


@dataclass
class TokenSequence:
    """Per-patch token maps, (num_patches, token_spatial, token_spatial, token_dim)."""

    tokens: torch.Tensor
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise DataError(f"tokens must be 4-d, got shape {tuple(self.tokens.shape)}")
        if self.tokens.shape[0] != self.grid_rows * self.grid_cols:
            raise DataError("num_patches does not equal grid_rows * grid_cols")

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_spatial(self) -> int:
        return self.tokens.shape[1]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[3]


@dataclass
class SkipCache:
    """Per-stage encoder feature maps kept for decoder skip connections.

    Each stage holds (num_patches, s, s, dim). Staged entries live in host
    numpy buffers (outside the device tensor pool) and are re-uploaded one
    decoder mini-batch at a time via :meth:`fetch`.
    """

    stages: list = field(default_factory=list)  # torch.Tensor | np.ndarray per stage
    staged: bool = False

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def fetch(self, stage: int, lo: int, hi: int, device, dtype) -> torch.Tensor:
        buf = self.stages[stage]
        if isinstance(buf, np.ndarray):
            return torch.from_numpy(buf[lo:hi]).to(device=device, dtype=dtype)
        return buf[lo:hi].to(device=device, dtype=dtype)


class PatchEncoder(nn.Module):
    """Hierarchical backbone applied independently to every patch."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg = cfg.resolved()
        bad = validate_config(cfg)
        if bad:
            raise ConfigError("; ".join(bad))
        self.cfg = cfg

        self.patch_embed = nn.Conv2d(cfg.in_channels, cfg.embed_dim,
                                     kernel_size=cfg.embed_stride, stride=cfg.embed_stride)
        self.embed_norm = nn.LayerNorm(cfg.embed_dim)

        dims = cfg.stage_dims()
        self.stages = nn.ModuleList(
            make_stage(cfg.stage_kind, dims[i], cfg.stage_depths[i], cfg.num_heads[i],
                       cfg.window_size, cfg.mlp_ratio, cfg.rel_bias_hidden)
            for i in range(cfg.num_stages))
        self.merges = nn.ModuleList(PatchMerging(dims[i]) for i in range(cfg.num_stages - 1))
        init_backbone_weights(self)

    def forward(self, patches: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """patches (B, p, p, C) -> tokens (B, ts, ts, D) and per-stage skips."""
        x = self.patch_embed(patches.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        skips = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            skips.append(x)
            if i < len(self.merges):
                x = self.merges[i](x)
        return x, skips


def encode_patches(
    patches: PatchBatch,
    encoder: PatchEncoder,
    mini_batch_size: int | None = None,
    stage_skips_to_host: bool = True,
) -> tuple[torch.Tensor, SkipCache]:
    """Run the per-patch backbone over all patches in sequential mini-batches.

    The result is independent of the mini-batch size (to float tolerance)
    and ordered row-major to match the input batch. With
    ``stage_skips_to_host`` the skip pyramid is copied into host numpy
    buffers mini-batch by mini-batch, so device residency never grows with
    the patch count beyond the retained tokens.
    """
    cfg = encoder.cfg
    if patches.patch_size != cfg.patch_size:
        raise DataError(f"patches are {patches.patch_size}px but encoder expects {cfg.patch_size}px")
    if patches.channels != cfg.in_channels:
        raise DataError(f"patches have {patches.channels} channels but encoder expects {cfg.in_channels}")
    mb = mini_batch_size if mini_batch_size is not None else cfg.mini_batch_size
    if mb < 1:
        raise ConfigError(f"mini_batch_size must be >= 1, got {mb}")

    device = next(encoder.parameters()).device
    dtype = next(encoder.parameters()).dtype
    n = len(patches)
    grad = torch.is_grad_enabled() and any(p.requires_grad for p in encoder.parameters())
    if grad and stage_skips_to_host:
        stage_skips_to_host = False  # staging would detach the graph

    tok_chunks: list[torch.Tensor] = []
    skip_chunks: list[list[torch.Tensor]] | None = None
    host_stages: list[np.ndarray] | None = None
    for lo in range(0, n, mb):
        hi = min(lo + mb, n)
        chunk = patches.chunk_to(lo, hi, device, dtype)
        tok, skips = encoder(chunk)
        tok_chunks.append(tok)
        if stage_skips_to_host:
            if host_stages is None:
                host_stages = [np.empty((n, *s.shape[1:]), dtype=np.float32) for s in skips]
            for buf, s in zip(host_stages, skips):
                buf[lo:hi] = s.detach().to("cpu", torch.float32).numpy()
        else:
            if skip_chunks is None:
                skip_chunks = [[] for _ in skips]
            for buf, s in zip(skip_chunks, skips):
                buf.append(s)

    tokens = torch.cat(tok_chunks, dim=0)
    if stage_skips_to_host:
        cache = SkipCache(stages=list(host_stages), staged=True)
    else:
        cache = SkipCache(stages=[torch.cat(buf, dim=0) for buf in skip_chunks], staged=False)
    return tokens, cache


def encode_patch_batch(
    patches: PatchBatch,
    encoder: PatchEncoder,
    grid_rows: int,
    grid_cols: int,
    mini_batch_size: int | None = None,
    stage_skips_to_host: bool = True,
) -> tuple[TokenSequence, SkipCache]:
    tokens, cache = encode_patches(patches, encoder, mini_batch_size, stage_skips_to_host)
    return TokenSequence(tokens=tokens, grid_rows=grid_rows, grid_cols=grid_cols), cache
