import numpy as np
import pytest
import torch

from tiledehaze import DehazeModel, ModelConfig, dehaze
from tiledehaze.encoder import EncoderConfig, encode_patches
from tiledehaze.errors import StageMemoryError
from tiledehaze.profiling import MemoryMeter, module_parameter_bytes

from conftest import random_image, toy_encoder_config, toy_model_config


def test_cnn_backbone_behind_same_interface(rng):
    cfg = toy_model_config(backbone="cnn-t", embed_dim=16, stage_depths=(1, 1), num_heads=(1, 1))
    torch.manual_seed(0)
    model = DehazeModel(cfg)
    img = random_image(rng, 70, 40)
    out = dehaze(img, model)
    assert out.data.shape == (70, 40, 3)
    a = dehaze(img, model, mini_batch_size=1).data
    b = dehaze(img, model, mini_batch_size=4).data
    assert np.abs(a - b).max() <= 1e-5


def test_encoder_memory_grows_only_with_retained_outputs():
    # 4x the patches: encoder peak rises by at most the retained tokens
    # (skips are host-staged) plus 10%
    torch.manual_seed(0)
    from tiledehaze.encoder import PatchEncoder
    from tiledehaze.tiling import PatchBatch

    enc = PatchEncoder(toy_encoder_config(mini_batch_size=2))
    rng = np.random.default_rng(0)

    def run(n):
        patches = PatchBatch(rng.random((n, 32, 32, 3), dtype=np.float32))
        with MemoryMeter(static_bytes=module_parameter_bytes(enc)) as meter:
            with meter.stage("encode"):
                with torch.no_grad():
                    tokens, skips = encode_patches(patches, enc, stage_skips_to_host=True)
        token_bytes = tokens.numel() * tokens.element_size()
        return meter.peaks["encode"], token_bytes

    peak_small, tok_small = run(8)
    peak_large, tok_large = run(32)
    retained_growth = tok_large - tok_small
    assert peak_large <= 1.10 * (peak_small + retained_growth), \
        (peak_small, peak_large, retained_growth)


def test_oom_surfaces_stage_and_token_count(toy_model, rng, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("DefaultCPUAllocator: not enough memory: you tried to allocate 1 TB")

    monkeypatch.setattr(toy_model.bottleneck, "forward", boom)
    with pytest.raises(StageMemoryError) as err:
        dehaze(random_image(rng, 64, 64), toy_model)
    assert err.value.stage == "bottleneck"
    assert err.value.token_count == 4 * 16  # 4 patches x token_spatial^2
