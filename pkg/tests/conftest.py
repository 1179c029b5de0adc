import numpy as np
import pytest
import torch

from tiledehaze import BottleneckConfig, DecoderConfig, DehazeModel, EncoderConfig, ModelConfig
from tiledehaze.bottleneck import ApproxParams


def toy_encoder_config(**overrides) -> EncoderConfig:
    base = dict(backbone="windowed-t", patch_size=32, embed_dim=16, stage_depths=(1, 1),
                num_heads=(2, 2), embed_stride=4, window_size=4, mini_batch_size=2)
    base.update(overrides)
    return EncoderConfig(**base)


def toy_model_config(attention_mode="exact", **enc_overrides) -> ModelConfig:
    enc = toy_encoder_config(**enc_overrides).resolved()
    bn = BottleneckConfig(depth=1, num_heads=4, token_dim=enc.token_dim,
                          token_spatial=enc.token_spatial, attention_mode=attention_mode,
                          approx=ApproxParams(block_size=64, low_rank=8, seed=3),
                          ffn_ratio=2.0)
    dec = DecoderConfig(mini_batch_size=2)
    return ModelConfig(encoder=enc, bottleneck=bn, decoder=dec)


@pytest.fixture
def toy_model():
    torch.manual_seed(1234)
    return DehazeModel(toy_model_config())


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_image(rng, h, w, c=3):
    from tiledehaze import ImageTensor

    return ImageTensor(rng.random((h, w, c), dtype=np.float32))
