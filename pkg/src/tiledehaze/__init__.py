"""Memory-bounded tiled haze removal for arbitrarily large images.

The pipeline partitions an image into fixed-size patches, encodes each
patch locally in sequential mini-batches, exchanges global context
through an attention bottleneck, decodes patches back, and reassembles
the output — so peak device memory is set by the mini-batch size and the
retained token sequence, not by the image size. Companion tools cover
attribution maps, synthetic haze data, quality metrics, memory
profiling, and training.
"""

__version__ = "0.1.0"

from .attribution import AttributionMap, AttributionRegion, DamConfig, compute_dam, detector_response, render_heatmap
from .bottleneck import (
    ApproxParams,
    BottleneckConfig,
    GlobalBottleneck,
    GlobalSequence,
    approximate_attention,
    exact_attention,
    rms_normalize,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import resolve_model_config
from .decoder import DecoderConfig, PatchDecoder, decode_patches, patch_expand
from .encoder import EncoderConfig, PatchEncoder, SkipCache, TokenSequence, encode_patches, validate_config
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    StageMemoryError,
    TileDehazeError,
    TrainingHalted,
    WeightShapeError,
)
from .haze import HazeParams, build_dataset_manifest, generate_transmission, synthesize_haze
from .image import ImageTensor, load_image, save_image
from .metrics import EvalReport, evaluate_pairs, psnr, ssim
from .model import DehazeModel, ModelConfig, dehaze
from .profiling import MemoryMeter, ProfileReport, expected_retained_bytes, profile_run
from .tiling import PatchBatch, TileLayout, partition, reassemble
from .training import TrainConfig, l1_loss, lr_at, train

__all__ = [
    "ApproxParams", "AttributionMap", "AttributionRegion", "BottleneckConfig",
    "CheckpointError", "CheckpointVersionError", "ConfigError", "DamConfig",
    "DataError", "DecoderConfig", "DehazeModel", "EncoderConfig", "EvalReport",
    "GlobalBottleneck", "GlobalSequence", "HazeParams", "ImageTensor",
    "MemoryMeter", "ModelConfig", "PatchBatch", "PatchDecoder", "PatchEncoder",
    "ProfileReport", "SkipCache", "StageMemoryError", "TileDehazeError",
    "TileLayout", "TokenSequence", "TrainConfig", "TrainingHalted",
    "WeightShapeError", "approximate_attention", "build_dataset_manifest",
    "compute_dam", "decode_patches", "dehaze", "detector_response",
    "encode_patches", "evaluate_pairs", "exact_attention",
    "expected_retained_bytes", "generate_transmission", "l1_loss",
    "load_checkpoint", "load_image", "lr_at", "partition", "patch_expand",
    "profile_run", "psnr", "reassemble", "render_heatmap",
    "resolve_model_config", "rms_normalize", "save_checkpoint", "save_image",
    "ssim", "synthesize_haze", "train", "validate_config",
]
