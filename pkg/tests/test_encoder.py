import numpy as np
import pytest
import torch

from tiledehaze import EncoderConfig, PatchEncoder, encode_patches, validate_config
from tiledehaze.errors import DataError
from tiledehaze.tiling import PatchBatch

from conftest import toy_encoder_config


def make_encoder(**overrides):
    torch.manual_seed(7)
    return PatchEncoder(toy_encoder_config(**overrides))


def random_patches(n, p, c=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return PatchBatch(torch.rand(n, p, p, c, generator=g))


class TestValidateConfig:
    def test_clean_config(self):
        assert validate_config(toy_encoder_config()) == []
        assert validate_config(EncoderConfig(backbone="windowed-t", patch_size=256)) == []

    def test_divisibility_violation(self):
        cfg = EncoderConfig(backbone="windowed-t", patch_size=200)
        assert any("not divisible" in v for v in validate_config(cfg))

    def test_positivity_violation(self):
        cfg = toy_encoder_config(mini_batch_size=0)
        assert any("mini_batch_size" in v for v in validate_config(cfg))

    def test_head_divisibility(self):
        cfg = toy_encoder_config(embed_dim=10, num_heads=(3, 3))
        assert any("head count" in v for v in validate_config(cfg))

    def test_unknown_backbone_reported(self):
        cfg = EncoderConfig(backbone="resnext-9000")
        assert validate_config(cfg) != []


class TestEncodePatches:
    def test_token_shapes(self):
        enc = make_encoder()
        patches = random_patches(6, 32)
        tokens, skips = encode_patches(patches, enc)
        # 32px patch, stride 4 + one merge -> 4x4 tokens at 2*embed_dim
        assert tokens.shape == (6, 4, 4, 32)
        assert skips.num_stages == 2
        assert skips.stages[0].shape == (6, 8, 8, 16)
        assert skips.stages[1].shape == (6, 4, 4, 32)

    def test_default_preset_shape_arithmetic(self):
        # 256px patches, 4 stages, downsample 32 -> 8x8 token maps
        cfg = EncoderConfig(backbone="windowed-t", patch_size=256, embed_dim=32,
                            stage_depths=(1, 1, 1, 1), num_heads=(2, 2, 2, 2),
                            mini_batch_size=16)
        assert cfg.downsample_factor_total == 32
        torch.manual_seed(0)
        enc = PatchEncoder(cfg)
        tokens, _ = encode_patches(random_patches(2, 256), enc)
        assert tokens.shape == (2, 8, 8, 256)

    def test_identical_patches_identical_tokens(self):
        enc = make_encoder()
        one = torch.rand(1, 32, 32, 3, generator=torch.Generator().manual_seed(3))
        patches = PatchBatch(one.repeat(4, 1, 1, 1))
        tokens, _ = encode_patches(patches, enc, mini_batch_size=4)
        for i in range(1, 4):
            assert torch.equal(tokens[0], tokens[i])

    def test_mini_batch_invariance(self):
        enc = make_encoder()
        patches = random_patches(8, 32, seed=11)
        with torch.no_grad():
            t1, s1 = encode_patches(patches, enc, mini_batch_size=1)
            t4, s4 = encode_patches(patches, enc, mini_batch_size=4)
            t8, s8 = encode_patches(patches, enc, mini_batch_size=8)
        assert float((t1 - t4).abs().max()) <= 1e-5
        assert float((t1 - t8).abs().max()) <= 1e-5
        for a, b in zip(s1.stages, s8.stages):
            assert float(np.abs(a - b).max()) <= 1e-5

    def test_permutation_equivariance(self):
        enc = make_encoder()
        patches = random_patches(6, 32, seed=5)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        tokens, _ = encode_patches(patches, enc, mini_batch_size=1)
        tokens_p, _ = encode_patches(PatchBatch(patches.patches[perm]), enc, mini_batch_size=1)
        assert torch.equal(tokens[perm], tokens_p)

    def test_rejects_wrong_patch_size(self):
        enc = make_encoder()
        with pytest.raises(DataError):
            encode_patches(random_patches(2, 64), enc)

    def test_skips_staged_to_host_are_numpy(self):
        enc = make_encoder()
        with torch.no_grad():
            tokens, skips = encode_patches(random_patches(4, 32), enc, stage_skips_to_host=True)
        assert skips.staged
        assert all(isinstance(s, np.ndarray) for s in skips.stages)

    def test_grad_mode_keeps_graph(self):
        enc = make_encoder()
        patches = PatchBatch(torch.rand(2, 32, 32, 3, generator=torch.Generator().manual_seed(1)))
        tokens, skips = encode_patches(patches, enc, stage_skips_to_host=True)
        # staging silently disabled under grad so the graph survives
        assert tokens.requires_grad
        assert not skips.staged
        tokens.sum().backward()
