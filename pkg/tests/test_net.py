import json

import numpy as np
import pytest

from lfmamba import geometry
from lfmamba.net import (BUDGET_TARGETS, LfMamba, NetworkConfig, analytic_param_count, budget_errors, calibrate,
                         count_flops, count_params, toy_config)
from lfmamba.nn import CheckpointError
from lfmamba.tensor import ShapeError, precision


class TestConfig:
    def test_json_round_trip(self):
        cfg = toy_config(fusion="sum", dt_rank=3)
        back = NetworkConfig.from_dict(json.loads(cfg.to_json()))
        assert back == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError):
            NetworkConfig.from_dict({"channels": 8, "depth": 3})

    @pytest.mark.parametrize("changes", [{"fusion": "max"}, {"variant": "vsr"}, {"scale": 0},
                                         {"channels": 6, "expand": 1}])
    def test_invalid(self, changes):
        with pytest.raises((ValueError, ShapeError)):
            NetworkConfig(**changes)


class TestParameterCounts:
    @pytest.mark.parametrize("changes", [{}, {"fusion": "sum"}, {"fusion": "none"}, {"n_basic": 2},
                                         {"scale": 3}, {"ife_convs": 3}, {"d_skip": False}, {"dt_rank": 2},
                                         {"variant": "asr"}])
    def test_closed_form_matches_built_model(self, changes):
        cfg = toy_config(**changes)
        assert analytic_param_count(cfg) == count_params(LfMamba(cfg))

    def test_default_budgets_within_band(self):
        for key, err in budget_errors(NetworkConfig()).items():
            assert abs(err) <= 0.15, (key, err)

    def test_calibration_is_frozen(self):
        best = calibrate()
        cfg = NetworkConfig()
        assert (best["expand"], best["ife_convs"]) == (cfg.expand, cfg.ife_convs)
        assert best["worst_error"] <= 0.15

    def test_targets_cover_scales_and_depths(self):
        assert {k[1] for k in BUDGET_TARGETS} == {2, 4}
        assert {k[2] for k in BUDGET_TARGETS} == {1, 2, 3}


class TestFlops:
    def test_counting_conventions(self):
        f = count_flops(NetworkConfig(), (5, 5, 32, 32))
        assert f["flops_mac2"] - f["flops_mac1"] == f["macs"]
        assert f["flops_mac1"] == f["macs"] + f["scan_flops"]

    def test_linear_in_pixels(self):
        cfg = toy_config()
        a = count_flops(cfg, (2, 2, 8, 8))
        b = count_flops(cfg, (2, 2, 16, 16))
        for key in a:
            assert b[key] == 4 * a[key]

    def test_more_blocks_cost_more(self):
        base = count_flops(NetworkConfig(), (5, 5, 32, 32))["macs"]
        deeper = count_flops(NetworkConfig(n_basic=3), (5, 5, 32, 32))["macs"]
        assert deeper > base


class TestForward:
    def test_untrained_model_is_bicubic(self):
        lf = np.random.default_rng(0).uniform(size=(2, 2, 5, 6))
        out = LfMamba(toy_config()).predict(lf)
        np.testing.assert_allclose(out, geometry.bicubic_resize(lf, 2), atol=1e-14)

    def test_shapes_and_batching(self):
        model = LfMamba(toy_config(zero_tail=False, scale=3))
        rng = np.random.default_rng(1)
        batch = rng.uniform(size=(2, 2, 2, 4, 5))
        out = model.predict(batch)
        assert out.shape == (2, 2, 2, 12, 15)
        for i in range(2):
            np.testing.assert_allclose(model.predict(batch[i]), out[i], atol=1e-12)

    def test_angular_mismatch(self):
        with pytest.raises(ShapeError):
            LfMamba(toy_config()).predict(np.zeros((3, 3, 4, 4)))
        with pytest.raises(ShapeError):
            LfMamba(toy_config()).predict(np.zeros((2, 2, 4)))

    def test_synthesis_head(self):
        model = LfMamba(toy_config(variant="asr", asr_channels=4, asr_target=3))
        assert model.predict(np.zeros((2, 2, 4, 5))).shape == (3, 3, 4, 5)

    def test_float32_model(self):
        with precision(np.float32):
            model = LfMamba(toy_config(zero_tail=False))
            out = model.predict(np.ones((2, 2, 3, 3), np.float32))
        assert out.dtype == np.float32
        assert all(p.dtype == np.float32 for p in model.parameters())

    def test_fusion_variants_differ(self):
        lf = np.random.default_rng(2).uniform(size=(2, 2, 4, 4))
        outs = [LfMamba(toy_config(fusion=f, zero_tail=False)).predict(lf) for f in ("concat", "sum", "none")]
        assert not np.allclose(outs[1], outs[2])


class TestPersistence:
    def test_save_load_bit_exact(self, tmp_path):
        model = LfMamba(toy_config(zero_tail=False, seed=3))
        path = tmp_path / "m.lfm"
        model.save(path)
        back = LfMamba.load(path)
        assert back.config == model.config
        lf = np.random.default_rng(3).uniform(size=(2, 2, 4, 4))
        assert np.array_equal(back.predict(lf), model.predict(lf))

    def test_corrupted_checkpoint(self, tmp_path):
        path = tmp_path / "m.lfm"
        LfMamba(toy_config()).save(path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError):
            LfMamba.load(path)

    def test_seed_determinism(self):
        a, b = LfMamba(toy_config(seed=5)), LfMamba(toy_config(seed=5))
        for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert ka == kb and np.array_equal(pa.data, pb.data)
