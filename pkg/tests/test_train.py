import math

import numpy as np
import pytest

from lfmamba import geometry
from lfmamba.net import LfMamba, toy_config
from lfmamba.nn import Param, l1_loss
from lfmamba.tensor import DomainError, StateError, as_tensor, make_op, mul, precision, sum_
from lfmamba.train import (TrainConfig, TrainingError, aggregate, evaluate, gaussian_window, grad_check,
                           lr_at_epoch, moving_average, overfit_single_patch, psnr, ssim, synthetic_lf,
                           synthetic_pairs, train, view_metrics)


class TestMetrics:
    def test_psnr_closed_form(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.1)
        assert psnr(a, b) == pytest.approx(20.0)
        assert psnr(a, a) == math.inf
        assert psnr(a, 25.5 * np.ones((4, 4)), peak=255.0) == pytest.approx(20.0)

    def test_gaussian_window(self):
        g = gaussian_window()
        assert g.shape == (11,)
        assert g.sum() == pytest.approx(1.0)
        assert np.array_equal(g, g[::-1])
        assert g[5] / g[4] == pytest.approx(np.exp(1 / (2 * 1.5 ** 2)))

    def test_ssim_matches_reference_implementation(self):
        metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(24, 30))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_ssim_properties(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert ssim(a, b) < 0.5
        with pytest.raises(DomainError):
            ssim(a[:8, :8], b[:8, :8])

    def test_view_metrics_layout(self):
        gt = np.random.default_rng(2).uniform(size=(2, 3, 12, 12))
        pred = gt.copy()
        pred[1, 2] += 0.1
        m = view_metrics(pred, gt)
        assert m.shape == (2, 3, 2)
        assert m[1, 2, 0] == pytest.approx(20.0)
        assert np.isinf(m[0, 0, 0])

    def test_evaluate_is_views_then_scenes(self):
        rng = np.random.default_rng(3)
        gts = [rng.uniform(size=(1, 2, 12, 12)), rng.uniform(size=(2, 2, 12, 12))]
        preds = [g + 0.01 for g in gts]
        report = evaluate(preds, gts)
        per = [view_metrics(p, g) for p, g in zip(preds, gts)]
        assert report.psnr == pytest.approx(np.mean([v[..., 0].mean() for v in per]))
        assert len(report.lines()) >= 1
        assert len(report.per_scene) == 2

    def test_aggregate_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestSchedule:
    def test_halving(self):
        cfg = TrainConfig()
        assert [lr_at_epoch(e, cfg) for e in (0, 14, 15, 30, 59)] == [2e-4, 2e-4, 1e-4, 5e-5, 2.5e-5]
        assert cfg.lr_at(45) == pytest.approx(2.5e-5)


def wrong_square(x, factor):
    """x**2 with a deliberately mis-scaled adjoint."""
    x = as_tensor(x)
    return make_op(x.data ** 2, (x,), lambda g: (factor * 2.0 * g * x.data,))


class TestGradCheck:
    def test_toy_network_passes(self):
        model = LfMamba(toy_config(zero_tail=False))
        lf = np.random.default_rng(4).uniform(size=(2, 2, 3, 3))
        target = np.random.default_rng(5).uniform(size=(2, 2, 6, 6))
        report = grad_check(lambda: l1_loss(model(lf), target), model, max_per_param=3)
        assert report.passed, report.message

    @pytest.mark.parametrize("factor", [2.0, 1.01])
    def test_detects_wrong_adjoint(self, factor):
        p = Param(np.random.default_rng(6).normal(size=(3, 4)))
        w = np.random.default_rng(7).normal(size=(3, 4))
        report = grad_check(lambda: sum_(mul(wrong_square(p, factor), w)), {"p": p})
        assert not report.passed
        assert report.worst_param == "p"
        assert report.max_rel_error > 1e-3

    def test_correct_adjoint_passes(self):
        p = Param(np.random.default_rng(6).normal(size=(3, 4)))
        report = grad_check(lambda: sum_(wrong_square(p, 1.0)), [p])
        assert report.passed and report.checked == 12

    def test_requires_float64(self):
        with precision(np.float32):
            p = Param(np.ones(2))
        with pytest.raises(StateError):
            grad_check(lambda: sum_(p), [p])

    def test_non_finite_names_parameter(self):
        p = Param(np.array([1.0, -1.0]))
        report = grad_check(lambda: sum_(mul(p, np.array([np.inf, 1.0]))), {"weights": p})
        assert not report.passed
        assert not math.isfinite(report.max_rel_error)


class TestSyntheticData:
    def test_constant_disparity_structure(self):
        lf = synthetic_lf(np.random.default_rng(8), (3, 3), (20, 20), disparity=2.0)
        # integer disparity: neighbouring views are exact shifts of each other
        np.testing.assert_allclose(lf[0, 1, 2:, :], lf[1, 1, :-2, :], atol=1e-12)
        np.testing.assert_allclose(lf[1, 0, :, 2:], lf[1, 1, :, :-2], atol=1e-12)
        assert lf.min() >= 0.05 and lf.max() <= 0.95

    def test_pairs(self):
        pairs = synthetic_pairs(2, np.random.default_rng(9), (2, 2), (6, 7), scale=3)
        for lo, hi in pairs:
            assert lo.shape == (2, 2, 6, 7) and hi.shape == (2, 2, 18, 21)


class TestTraining:
    def small_setup(self, seed=0):
        data = synthetic_pairs(3, np.random.default_rng(seed), (2, 2), (4, 4), scale=2)
        return data, TrainConfig(lr0=1e-3, batch=2, total_epochs=2, halve_every=1, seed=seed)

    def test_deterministic_given_seed(self):
        runs = []
        for _ in range(2):
            data, cfg = self.small_setup()
            model = LfMamba(toy_config(zero_tail=False))
            result = train(model, data, cfg)
            runs.append((result.losses, model.state_dict()))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert np.array_equal(runs[0][1][k], runs[1][1][k])

    def test_logs_and_checkpoints(self, tmp_path):
        data, cfg = self.small_setup()
        val = synthetic_pairs(1, np.random.default_rng(1), (2, 2), (6, 6), scale=2)
        result = train(LfMamba(toy_config()), data, cfg, val=val, out_dir=tmp_path)
        lines = (tmp_path / "train.log").read_text().splitlines()
        assert len(lines) == len(result.losses) == 4
        epoch, step, lr, loss, val = lines[-1].split()
        assert (int(epoch), int(step), float(lr)) == (1, 3, 5e-4)
        assert [p.name for p in result.checkpoints] == ["epoch_001.lfm", "epoch_002.lfm"]
        assert len(result.val_psnr) == 2
        LfMamba.load(result.checkpoints[-1])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(LfMamba(toy_config()), [], TrainConfig())

    def test_non_finite_loss_restores_last_good(self, tmp_path):
        data, cfg = self.small_setup()
        model = LfMamba(toy_config())
        before = model.state_dict()
        bad = [(lo, np.full_like(hi, np.nan)) for lo, hi in data]
        with pytest.raises(TrainingError) as info:
            train(model, bad, cfg, out_dir=tmp_path)
        assert info.value.checkpoint == tmp_path / "last_good.lfm"
        for k, v in model.state_dict().items():
            assert np.array_equal(v, before[k])

    def test_augmentation_keeps_pairs_aligned(self):
        # an identity-scaled pair stays a valid pair under every op
        lo = np.random.default_rng(10).uniform(size=(3, 3, 4, 4))
        hi = geometry.bicubic_resize(lo, 2)
        for op in geometry.AUGMENT_OPS:
            np.testing.assert_allclose(geometry.bicubic_resize(geometry.augment(lo, op), 2),
                                       geometry.augment(hi, op), atol=1e-12)


class TestOverfitHelper:
    def test_curve_conventions(self):
        model = LfMamba(toy_config(zero_tail=False))
        (lo, hi), = synthetic_pairs(1, np.random.default_rng(11), (2, 2), (4, 4), scale=2)
        assert len(overfit_single_patch(model, lo, hi, steps=0)) == 1
        curve = overfit_single_patch(model, lo, hi, steps=5, lr=1e-3)
        assert len(curve) == 6
        assert curve[-1] < curve[0]

    def test_moving_average(self):
        np.testing.assert_allclose(moving_average(np.arange(5.0), 2), [0.5, 1.5, 2.5, 3.5])
        assert moving_average(np.ones(3), 5).size == 0
