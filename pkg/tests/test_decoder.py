import numpy as np
import pytest
import torch

from tiledehaze import (
    DecoderConfig,
    GlobalSequence,
    PatchDecoder,
    TokenSequence,
    decode_patches,
    encode_patches,
    patch_expand,
)
from tiledehaze.decoder import PatchExpand
from tiledehaze.encoder import PatchEncoder, SkipCache
from tiledehaze.errors import ConfigError, DataError
from tiledehaze.tiling import PatchBatch

from conftest import toy_encoder_config


def build_pair(seed=0, **enc_overrides):
    torch.manual_seed(seed)
    enc_cfg = toy_encoder_config(**enc_overrides)
    encoder = PatchEncoder(enc_cfg)
    decoder = PatchDecoder(enc_cfg, DecoderConfig(mini_batch_size=2))
    return encoder, decoder


def encode_for_decode(encoder, n=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    patches = PatchBatch(torch.rand(n, encoder.cfg.patch_size, encoder.cfg.patch_size, 3, generator=g))
    with torch.no_grad():
        tokens, skips = encode_patches(patches, encoder)
    seq = GlobalSequence.from_token_sequence(
        TokenSequence(tokens=tokens, grid_rows=2, grid_cols=n // 2))
    return seq, skips


class TestPatchExpand:
    def test_shape_doubling(self):
        torch.manual_seed(0)
        mod = PatchExpand(64, 32)
        out = patch_expand(torch.randn(2, 8, 8, 64), mod)
        assert out.shape == (2, 16, 16, 32)

    def test_rejects_other_scales(self):
        mod = PatchExpand(8, 4)
        with pytest.raises(ConfigError):
            patch_expand(torch.randn(1, 4, 4, 8), mod, target_scale=4)

    def test_delta_input_transposed_conv_oracle(self):
        # identity-like kernel: delta at (i,j) lands at (2i, 2j) upscaled
        mod = PatchExpand(1, 1)
        with torch.no_grad():
            mod.deconv.weight.zero_()
            mod.deconv.weight[0, 0, 0, 0] = 1.0
            mod.deconv.bias.zero_()
        x = torch.zeros(1, 4, 4, 1)
        x[0, 2, 1, 0] = 1.0
        out = mod(x)
        want = torch.zeros(1, 8, 8, 1)
        want[0, 4, 2, 0] = 1.0
        assert torch.equal(out, want)

    def test_zeros_to_zeros_with_zero_bias(self):
        torch.manual_seed(1)
        mod = PatchExpand(4, 2)
        with torch.no_grad():
            mod.deconv.bias.zero_()
        out = mod(torch.zeros(3, 4, 4, 4))
        assert torch.equal(out, torch.zeros(3, 8, 8, 2))


class TestDecodePatches:
    def test_output_shape_and_range(self):
        encoder, decoder = build_pair()
        seq, skips = encode_for_decode(encoder)
        with torch.no_grad():
            out = decode_patches(seq, skips, decoder)
        assert out.patches.shape == (4, 32, 32, 3)
        assert float(out.patches.min()) >= 0.0
        assert float(out.patches.max()) <= 1.0

    def test_mini_batch_invariance(self):
        encoder, decoder = build_pair()
        seq, skips = encode_for_decode(encoder, n=6)
        with torch.no_grad():
            a = decode_patches(seq, skips, decoder, mini_batch_size=1)
            b = decode_patches(seq, skips, decoder, mini_batch_size=6)
        assert float((a.patches - b.patches).abs().max()) <= 1e-5

    def test_zero_everything_gives_head_bias(self):
        encoder, decoder = build_pair()
        ts = encoder.cfg.token_spatial
        dims = encoder.cfg.stage_dims()
        spatials = encoder.cfg.stage_spatials()
        n = 2
        seq = GlobalSequence.from_token_sequence(TokenSequence(
            tokens=torch.zeros(n, ts, ts, encoder.cfg.token_dim), grid_rows=1, grid_cols=2))
        skips = SkipCache(stages=[torch.zeros(n, s, s, d) for s, d in zip(spatials, dims)])
        with torch.no_grad():
            decoder.head.weight.zero_()
            decoder.head.bias.fill_(0.25)
            out = decode_patches(seq, skips, decoder)
        assert torch.allclose(out.patches, torch.full_like(out.patches, 0.25))

    def test_rejects_missing_skip_stage(self):
        encoder, decoder = build_pair()
        seq, skips = encode_for_decode(encoder)
        skips.stages = skips.stages[:1]
        with pytest.raises(DataError):
            decode_patches(seq, skips, decoder)

    def test_rejects_provenance_gap(self):
        encoder, decoder = build_pair()
        seq, skips = encode_for_decode(encoder)
        broken = GlobalSequence(tokens=seq.tokens, patch_index=torch.zeros_like(seq.patch_index),
                                intra_position=seq.intra_position, grid_rows=seq.grid_rows,
                                grid_cols=seq.grid_cols, token_spatial=seq.token_spatial)
        with pytest.raises(DataError):
            decode_patches(broken, skips, decoder)

    def test_skip_sensitivity(self):
        # zeroing one patch's skip features must change that patch's output
        encoder, decoder = build_pair()
        seq, skips = encode_for_decode(encoder)
        with torch.no_grad():
            base = decode_patches(seq, skips, decoder)
        for s in range(skips.num_stages):
            skips.stages[s] = skips.stages[s].copy() if isinstance(skips.stages[s], np.ndarray) \
                else skips.stages[s].clone()
            skips.stages[s][1] = 0
        with torch.no_grad():
            out = decode_patches(seq, skips, decoder)
        assert float((out.patches[1] - base.patches[1]).abs().max()) > 0
        assert float((out.patches[0] - base.patches[0]).abs().max()) == 0

    def test_stage_count_symmetry_enforced(self):
        enc_cfg = toy_encoder_config()
        with pytest.raises(ConfigError):
            PatchDecoder(enc_cfg, DecoderConfig(stage_depths=(1, 1, 1)))

    def test_composed_scale_restores_patch_size(self):
        for depths, stride, patch in [((1, 1), 4, 32), ((1, 1, 1), 2, 64), ((1,), 4, 16)]:
            encoder, decoder = build_pair(stage_depths=depths, num_heads=(2,) * len(depths),
                                          embed_stride=stride, patch_size=patch)
            seq, skips = encode_for_decode(encoder, n=2)
            with torch.no_grad():
                out = decode_patches(seq, skips, decoder)
            assert out.patches.shape[1] == patch
