"""End-to-end pipeline: partition -> encode -> global bottleneck ->
decode -> reassemble, with dimension preservation and memory decoupling.

A loaded model is immutable for inference and shareable across threads;
`dehaze` never mutates it. Out-of-memory conditions surface as
:class:`~tiledehaze.errors.StageMemoryError` naming the failing stage —
the pipeline never silently falls back to sliced inference.
"""

from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .bottleneck import BottleneckConfig, GlobalBottleneck, GlobalSequence
from .decoder import DecoderConfig, PatchDecoder, decode_patches
from .encoder import EncoderConfig, PatchEncoder, TokenSequence, encode_patches
from .errors import ConfigError, StageMemoryError
from .image import ImageTensor
from .tiling import PatchBatch, partition_array, partition_tensor, reassemble_array, reassemble_tensor

_PRECISIONS = {"fp32": torch.float32, "fp16": torch.float16}


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bottleneck: BottleneckConfig | None = None   # None: derive dims from the encoder
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    precision: str = "fp32"

    def resolved(self) -> "ModelConfig":
        enc = self.encoder.resolved()
        bn = self.bottleneck
        if bn is None:
            bn = BottleneckConfig(token_dim=enc.token_dim, token_spatial=enc.token_spatial)
        out = replace(self, encoder=enc, bottleneck=bn)
        out.validate()
        return out

    def validate(self) -> None:
        enc = self.encoder.resolved()
        bn = self.bottleneck
        if self.precision not in _PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {self.precision!r}")
        if bn is not None:
            if bn.token_dim != enc.token_dim:
                raise ConfigError(
                    f"bottleneck token_dim {bn.token_dim} does not match encoder token dim {enc.token_dim}")
            if bn.token_spatial != enc.token_spatial:
                raise ConfigError(
                    f"bottleneck token_spatial {bn.token_spatial} does not match encoder ({enc.token_spatial})")
        if self.decoder.out_channels != enc.in_channels:
            raise ConfigError(
                f"decoder out_channels {self.decoder.out_channels} != encoder in_channels {enc.in_channels}")


class DehazeModel(nn.Module):
    """Encoder + bottleneck + decoder with the tiling glue."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config = config.resolved()
        self.config = config
        self.encoder = PatchEncoder(config.encoder)
        self.bottleneck = GlobalBottleneck(config.bottleneck)
        self.decoder = PatchDecoder(config.encoder, config.decoder)

    @property
    def patch_size(self) -> int:
        return self.config.encoder.patch_size

    def forward_patches(
        self,
        patches: PatchBatch,
        grid_rows: int,
        grid_cols: int,
        mini_batch_size: int | None = None,
        host_staging: bool = False,
        meter=None,
    ) -> PatchBatch:
        """Full pipeline on an already-partitioned image.

        With ``host_staging`` (inference) skip features and output patches
        live in host memory between mini-batches; without it the whole
        graph stays on device and is differentiable.
        """
        stage = _StageScope(meter)
        try:
            with stage("encode"):
                tokens, skips = encode_patches(patches, self.encoder, mini_batch_size,
                                               stage_skips_to_host=host_staging)
            seq = GlobalSequence.from_token_sequence(
                TokenSequence(tokens=tokens, grid_rows=grid_rows, grid_cols=grid_cols))
            with stage("bottleneck"):
                seq = self.bottleneck(seq)
            with stage("decode"):
                out = decode_patches(seq, skips, self.decoder, mini_batch_size,
                                     stage_output_to_host=host_staging)
            return out
        except (RuntimeError, MemoryError) as exc:
            if _is_oom(exc):
                n_tok = len(patches) * self.config.encoder.token_spatial ** 2
                raise StageMemoryError(stage.current, n_tok, cause=exc) from exc
            raise

    def forward_image(self, image: torch.Tensor, mini_batch_size: int | None = None,
                      meter=None) -> torch.Tensor:
        """(H, W, C) in [0,1] -> (H, W, C); gradient-capable end to end."""
        patches, layout = partition_tensor(image, self.patch_size)
        out = self.forward_patches(PatchBatch(patches), layout.grid_rows, layout.grid_cols,
                                   mini_batch_size, host_staging=False, meter=meter)
        return reassemble_tensor(out.patches, layout)

    # nn.Module interface for parameter-level tooling
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.forward_image(image)


class _StageScope:
    """Names the active pipeline stage; optionally forwards to a meter."""

    def __init__(self, meter):
        self.meter = meter
        self.current = "partition"

    def __call__(self, name):
        self.current = name
        if self.meter is not None:
            return self.meter.stage(name)
        return contextlib.nullcontext()


def _is_oom(exc: BaseException) -> bool:
    if isinstance(exc, MemoryError):
        return True
    text = str(exc).lower()
    return "out of memory" in text or "not enough memory" in text or "can't allocate" in text


def dehaze(
    image: ImageTensor,
    model: DehazeModel,
    mini_batch_size: int | None = None,
    precision: str | None = None,
    meter=None,
) -> ImageTensor:
    """Dehaze an image of any size; output dims equal input dims exactly.

    Deterministic given fixed weights and precision; results agree across
    mini-batch sizes within float tolerance. `precision` overrides the
    config ("fp16" runs a converted copy of the weights; the model passed
    in is never mutated).
    """
    precision = precision or model.config.precision
    if precision not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
    dtype = _PRECISIONS[precision]
    runner = model
    if next(model.parameters()).dtype != dtype:
        runner = copy.deepcopy(model).to(dtype)

    with torch.no_grad():
        patches, layout = partition_array(image.data, runner.patch_size)
        out = runner.forward_patches(
            PatchBatch(patches), layout.grid_rows, layout.grid_cols,
            mini_batch_size, host_staging=True, meter=meter)
        buf = out.patches
        if isinstance(buf, torch.Tensor):
            buf = buf.to(torch.float32).cpu().numpy()
        full = reassemble_array(buf, layout)
    return ImageTensor(np.clip(np.ascontiguousarray(full), 0.0, 1.0))
