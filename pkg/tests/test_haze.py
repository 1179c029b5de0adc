import numpy as np
import pytest

from tiledehaze import DataError, ImageTensor, generate_transmission, synthesize_haze
from tiledehaze.haze import (
    HAZY_THRESHOLD,
    T_MIN,
    HazeParams,
    build_dataset_manifest,
    hazy_from_record,
    read_manifest,
    value_noise,
)
from tiledehaze.image import save_image

from conftest import random_image


class TestScatteringModel:
    def _params(self, h, w, t):
        return HazeParams(airlight=np.array([1.0, 1.0, 1.0], dtype=np.float32),
                          transmission=t.astype(np.float32), coverage=0.5, intensity=0.5, seed=0)

    def test_t_one_is_identity(self, rng):
        clear = random_image(rng, 20, 30)
        hazy = synthesize_haze(clear, self._params(20, 30, np.ones((20, 30))))
        assert np.array_equal(hazy.data, clear.data)

    def test_t_zero_is_airlight(self, rng):
        clear = random_image(rng, 20, 30)
        t = np.zeros((20, 30), dtype=np.float32)
        params = HazeParams(airlight=np.array([0.9, 0.8, 0.7], dtype=np.float32),
                            transmission=t, coverage=1.0, intensity=1.0, seed=0)
        hazy = synthesize_haze(clear, params)
        assert np.array_equal(hazy.data, np.broadcast_to(params.airlight.reshape(1, 1, 3),
                                                         hazy.data.shape).astype(np.float32))

    def test_pointwise_arithmetic(self):
        clear = ImageTensor(np.full((4, 4, 3), 0.2, dtype=np.float32))
        t = np.full((4, 4), 0.5)
        hazy = synthesize_haze(clear, self._params(4, 4, t))
        assert np.allclose(hazy.data, 0.6, atol=1e-7)  # 0.2*0.5 + 1.0*0.5

    def test_monotone_in_transmission(self, rng):
        # brighter airlight than scene: less transmission -> more intensity
        clear = ImageTensor(np.full((8, 8, 3), 0.3, dtype=np.float32))
        values = []
        for tv in (0.9, 0.6, 0.3):
            hazy = synthesize_haze(clear, self._params(8, 8, np.full((8, 8), tv)))
            values.append(hazy.data.mean())
        assert values[0] < values[1] < values[2]

    def test_rejects_dim_mismatch(self, rng):
        clear = random_image(rng, 10, 10)
        with pytest.raises(DataError):
            synthesize_haze(clear, self._params(8, 8, np.ones((8, 8))))

    def test_range_always_unit(self, rng):
        clear = random_image(rng, 16, 16)
        for seed in range(5):
            params = HazeParams.sample(16, 16, coverage=1.0, intensity=1.0, seed=seed)
            hazy = synthesize_haze(clear, params)
            assert hazy.data.min() >= 0.0 and hazy.data.max() <= 1.0


class TestTransmissionField:
    def test_zero_coverage_is_clear(self):
        t = generate_transmission(32, 32, coverage=0.0, intensity=1.0, seed=1)
        assert np.array_equal(t, np.ones((32, 32), dtype=np.float32))

    def test_full_coverage_max_intensity_reaches_floor(self):
        mins = [generate_transmission(64, 64, 1.0, 1.0, seed=s).min() for s in range(20)]
        assert max(mins) <= T_MIN + 0.05

    def test_deterministic_per_seed(self):
        a = generate_transmission(40, 40, 0.6, 0.7, seed=11)
        b = generate_transmission(40, 40, 0.6, 0.7, seed=11)
        assert np.array_equal(a, b)
        c = generate_transmission(40, 40, 0.6, 0.7, seed=12)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("coverage", [0.2, 0.5, 0.8])
    def test_coverage_calibration(self, coverage):
        fracs = []
        for seed in range(20):
            t = generate_transmission(96, 96, coverage, 0.8, seed=seed)
            fracs.append(float((t < HAZY_THRESHOLD).mean()))
        assert abs(np.mean(fracs) - coverage) <= 0.05
        assert all(abs(f - coverage) <= 0.05 for f in fracs)

    def test_min_t_monotone_in_intensity(self):
        mins = [generate_transmission(64, 64, 1.0, i, seed=3).min()
                for i in (0.2, 0.5, 0.8, 1.0)]
        assert all(a >= b for a, b in zip(mins, mins[1:]))

    def test_field_is_smooth(self):
        t = generate_transmission(128, 128, 0.7, 0.9, seed=5)
        grad = np.abs(np.diff(t, axis=0)).max()
        assert grad < 0.2  # no hard speckle edges

    def test_value_noise_range_and_determinism(self):
        n = value_noise(50, 70, seed=9)
        assert n.min() >= 0.0 and n.max() <= 1.0
        assert np.array_equal(n, value_noise(50, 70, seed=9))


class TestManifest:
    def _make_clears(self, tmp_path, rng, count=5, size=24):
        clear_dir = tmp_path / "clear"
        clear_dir.mkdir()
        for i in range(count):
            save_image(random_image(rng, size, size), clear_dir / f"img{i}.png")
        return clear_dir

    def test_split_counts(self, tmp_path, rng):
        clear_dir = self._make_clears(tmp_path, rng, count=10)
        manifest = build_dataset_manifest(clear_dir, tmp_path / "out", split_ratio=0.8, seed=1)
        records = read_manifest(manifest)
        assert len(records) == 10
        assert sum(r["split"] == "train" for r in records) == 8
        assert sum(r["split"] == "test" for r in records) == 2

    def test_regeneration_byte_identical(self, tmp_path, rng):
        clear_dir = self._make_clears(tmp_path, rng)
        manifest = build_dataset_manifest(clear_dir, tmp_path / "out", seed=2)
        for rec in read_manifest(manifest):
            regen = hazy_from_record(rec)
            original = (tmp_path / "out" / rec["hazy"].split("/")[-1]).read_bytes()
            regen_path = tmp_path / "regen.png"
            save_image(regen, regen_path)
            assert regen_path.read_bytes() == original

    def test_corrupt_input_skipped_with_warning(self, tmp_path, rng, caplog):
        clear_dir = self._make_clears(tmp_path, rng, count=3)
        (clear_dir / "broken.png").write_bytes(b"not a png at all")
        import logging

        with caplog.at_level(logging.WARNING):
            manifest = build_dataset_manifest(clear_dir, tmp_path / "out", seed=0)
        records = read_manifest(manifest)
        assert len(records) == 3
        assert any("broken.png" in r.message for r in caplog.records)

    def test_empty_dir_rejected(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(DataError):
            build_dataset_manifest(empty, tmp_path / "out")
