"""Decoder: reconstructs haze-free patches from context-enriched tokens.

Mirrors the encoder stage-for-stage, replacing each downsample with a
transposed-convolution patch-expanding layer. Encoder skip features are
fused by channel concatenation followed by a linear projection back to
the stage width. Patches are processed in sequential mini-batches with
the same memory decoupling as the encoder; outputs are clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import init_backbone_weights, make_stage
from .bottleneck import GlobalSequence
from .encoder import EncoderConfig, SkipCache
from .errors import ConfigError, DataError
from .tiling import PatchBatch


@dataclass(frozen=True)
class DecoderConfig:
    stage_depths: tuple[int, ...] | None = None   # None: mirror the encoder
    num_heads: tuple[int, ...] | None = None
    window_size: int | None = None
    upsample: str = "transposed-conv"
    out_channels: int = 3
    mini_batch_size: int = 4

    def __post_init__(self):
        if self.upsample != "transposed-conv":
            raise ConfigError(f"unsupported upsample kind {self.upsample!r}")
        if self.mini_batch_size < 1:
            raise ConfigError(f"mini_batch_size must be >= 1, got {self.mini_batch_size}")


class PatchExpand(nn.Module):
    """Learned 2x spatial upsample via transposed convolution, channels-last."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_dim, out_dim, kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.deconv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


def patch_expand(x: torch.Tensor, module: PatchExpand, target_scale: int = 2) -> torch.Tensor:
    """Double the spatial dims of (B, h, w, C) features; channels follow
    the module's configured schedule."""
    if target_scale != 2:
        raise ConfigError(f"only target_scale=2 is supported, got {target_scale}")
    return module(x)


class SkipFusion(nn.Module):
    """Concatenate skip features on channels, project back to stage width."""

    def __init__(self, stage_dim: int, skip_dim: int):
        super().__init__()
        self.proj = nn.Linear(stage_dim + skip_dim, stage_dim)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([x, skip], dim=-1))


class PatchDecoder(nn.Module):
    """Mirror of the per-patch encoder, deepest stage first."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: DecoderConfig):
        super().__init__()
        enc_cfg = enc_cfg.resolved()
        depths = cfg.stage_depths if cfg.stage_depths is not None else enc_cfg.stage_depths
        heads = cfg.num_heads if cfg.num_heads is not None else enc_cfg.num_heads
        window = cfg.window_size if cfg.window_size is not None else enc_cfg.window_size
        if len(depths) != enc_cfg.num_stages:
            raise ConfigError(
                f"decoder has {len(depths)} stages but encoder has {enc_cfg.num_stages}; "
                "skip pairing must be total")
        if len(heads) != len(depths):
            raise ConfigError("decoder num_heads and stage_depths must have one entry per stage")
        self.cfg = cfg
        self.enc_cfg = enc_cfg

        dims = enc_cfg.stage_dims()                 # stage i width C * 2**i
        ns = enc_cfg.num_stages
        # processed deepest-first: fuse skip i, run stage i, expand to stage i-1
        self.fusions = nn.ModuleList(SkipFusion(dims[i], dims[i]) for i in reversed(range(ns)))
        self.stages = nn.ModuleList(
            make_stage(enc_cfg.stage_kind, dims[i], depths[i], heads[i], window,
                       enc_cfg.mlp_ratio, enc_cfg.rel_bias_hidden)
            for i in reversed(range(ns)))
        self.expands = nn.ModuleList(PatchExpand(dims[i], dims[i - 1]) for i in reversed(range(1, ns)))

        base = dims[0]
        self.final_expand = nn.ConvTranspose2d(base, base, kernel_size=enc_cfg.embed_stride,
                                               stride=enc_cfg.embed_stride)
        self.head = nn.Conv2d(base, cfg.out_channels, kernel_size=3, padding=1)
        init_backbone_weights(self)
        # mid-range head bias keeps the [0,1] clamp inactive at init
        nn.init.constant_(self.head.bias, 0.5)

    def forward(self, tokens: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        """tokens (B, ts, ts, D) + per-stage skips -> patches (B, p, p, out)."""
        ns = len(self.stages)
        x = tokens
        for j in range(ns):
            stage_idx = ns - 1 - j                  # encoder stage being mirrored
            x = self.fusions[j](x, skips[stage_idx])
            x = self.stages[j](x)
            if j < len(self.expands):
                x = self.expands[j](x)
        x = self.final_expand(x.permute(0, 3, 1, 2))
        x = self.head(F.gelu(x)).permute(0, 2, 3, 1)
        return x.clamp(0.0, 1.0)


def decode_patches(
    seq: GlobalSequence,
    skips: SkipCache,
    decoder: PatchDecoder,
    mini_batch_size: int | None = None,
    stage_output_to_host: bool = False,
) -> PatchBatch:
    """Decode every patch from the global sequence in sequential
    mini-batches, re-uploading staged skip features chunk by chunk.

    With ``stage_output_to_host`` each finished mini-batch is copied to a
    host buffer immediately, so device residency stays independent of the
    patch count (the inference default; incompatible with autograd).
    """
    enc_cfg = decoder.enc_cfg
    if skips.num_stages != enc_cfg.num_stages:
        raise DataError(
            f"skip cache has {skips.num_stages} stages but decoder expects {enc_cfg.num_stages}")
    seq.check_provenance_bijection()
    if int(seq.patch_index.max()) != seq.num_patches - 1 or int(seq.patch_index.min()) != 0:
        raise DataError("sequence provenance does not cover every patch")

    token_seq = seq.to_token_sequence()
    n = token_seq.num_patches
    for s in range(skips.num_stages):
        if skips.stages[s].shape[0] != n:
            raise DataError(f"skip stage {s} holds {skips.stages[s].shape[0]} patches, expected {n}")

    mb = mini_batch_size if mini_batch_size is not None else decoder.cfg.mini_batch_size
    if mb < 1:
        raise ConfigError(f"mini_batch_size must be >= 1, got {mb}")
    device = next(decoder.parameters()).device
    dtype = next(decoder.parameters()).dtype
    if stage_output_to_host and torch.is_grad_enabled() and \
            any(p.requires_grad for p in decoder.parameters()):
        stage_output_to_host = False  # staging would detach the graph

    host: np.ndarray | None = None
    chunks = []
    for lo in range(0, n, mb):
        hi = min(lo + mb, n)
        tok = token_seq.tokens[lo:hi].to(device=device, dtype=dtype)
        skip_chunk = [skips.fetch(s, lo, hi, device, dtype) for s in range(skips.num_stages)]
        out = decoder(tok, skip_chunk)
        if stage_output_to_host:
            if host is None:
                host = np.empty((n, *out.shape[1:]), dtype=np.float32)
            host[lo:hi] = out.detach().to("cpu", torch.float32).numpy()
        else:
            chunks.append(out)
    if stage_output_to_host:
        return PatchBatch(host)
    return PatchBatch(torch.cat(chunks, dim=0))
