import math

import numpy as np
import pytest

from tempered_nilm.data import APPLIANCES, AlignedPair, Segment, make_windows
from tempered_nilm.errors import DataError, DivergenceError, DomainError, NumericError, ShapeError
from tempered_nilm.metrics import report
from tempered_nilm.model import ModelConfig, NilmModel
from tempered_nilm.tensor import SeededRng, finite_diff_grad, max_relative_error
from tempered_nilm.training import (
    LossConfig, MaskingScheme, OptimizerState, TrainConfig, adamw_step, apply_mask,
    clip_global_norm, compute_loss, epoch_log_csv, evaluate, train,
)


def tiny_dataset(n=400, L=32, seed=0):
    rs = np.random.default_rng(seed)
    on = (np.arange(n * 4) // 60) % 2 == 1
    app = np.where(on, 150.0, 0.0)
    mains = 80 + app + rs.normal(0, 5, app.size)
    t = np.arange(app.size, dtype=float)
    return make_windows(AlignedPair([Segment(t, mains, app)]), APPLIANCES["fridge"], L)


class TestMasking:
    def test_tiny_ratio(self):
        _, pos = apply_mask(np.zeros((1, 1000)), MaskingScheme(1e-9), SeededRng(0))
        assert not pos.any()

    def test_mask_value(self):
        x = np.random.default_rng(0).standard_normal((4, 50))
        masked, pos = apply_mask(x, MaskingScheme(0.3, -1.0), SeededRng(1))
        assert np.all(masked[pos] == -1.0)
        np.testing.assert_array_equal(masked[~pos], x[~pos])

    def test_fraction(self):
        _, pos = apply_mask(np.zeros((100, 1000)), MaskingScheme(0.3), SeededRng(2))
        assert abs(pos.mean() - 0.3) < 0.01

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1])
    def test_ratio_domain(self, ratio):
        with pytest.raises(DomainError):
            MaskingScheme(ratio)


def scalar_loss(p, t, z, s, m, cfg):
    """Independent per-element evaluation of the composite loss."""
    B, L = p.shape
    idx = [(b, i) for b in range(B) for i in range(L) if m[b, i]]
    cnt = len(idx)
    mse = sum((p[b, i] - t[b, i]) ** 2 for b, i in idx) / cnt
    kl = 0.0
    for b in range(B):
        cols = [i for i in range(L) if m[b, i]]
        if not cols:
            continue
        zt = [t[b, i] / cfg.kl_temperature for i in cols]
        zp = [p[b, i] / cfg.kl_temperature for i in cols]
        lt = math.log(sum(math.exp(v) for v in zt))
        lp = math.log(sum(math.exp(v) for v in zp))
        for a, c in zip(zt, zp):
            kl += math.exp(a - lt) * ((a - lt) - (c - lp))
    kl /= cnt
    margin = sum(math.log1p(math.exp(-(2 * s[b, i] - 1) * z[b, i])) for b, i in idx) / cnt
    on = [(b, i) for b, i in idx if s[b, i] > 0.5]
    l1 = sum(abs(p[b, i] - t[b, i]) for b, i in on) / len(on) if on else 0.0
    total = mse + cfg.kl_weight * kl + cfg.margin_weight * margin + cfg.l1_on_weight * l1
    return total, {"mse": mse, "kl": kl, "margin": margin, "l1on": l1}


class TestLoss:
    def test_perfect_prediction(self):
        t = np.random.default_rng(0).random((2, 6))
        s = (t > 0.5).astype(float)
        z = np.where(s > 0, 40.0, -40.0)
        res = compute_loss(t, t, z, s, np.ones((2, 6), bool))
        assert res.components["mse"] == 0 and res.components["l1on"] == 0
        assert abs(res.components["kl"]) < 1e-15
        assert res.total <= 1e-15

    def test_four_positions(self):
        p = np.array([[0.2, 0.9, 0.1, 0.4]])
        t = np.array([[0.0, 1.0, 0.3, 0.4]])
        z = np.array([[-1.0, 2.0, 0.5, -0.5]])
        s = np.array([[0.0, 1.0, 1.0, 0.0]])
        m = np.ones((1, 4), bool)
        cfg = LossConfig()
        res = compute_loss(p, t, z, s, m, cfg)
        total, comps = scalar_loss(p, t, z, s, m, cfg)
        assert res.total == pytest.approx(total, rel=1e-12)
        for k in comps:
            assert res.components[k] == pytest.approx(comps[k], rel=1e-12, abs=1e-15)
        # hand values for the simple terms
        assert comps["mse"] == pytest.approx((0.04 + 0.01 + 0.04 + 0) / 4)
        assert comps["l1on"] == pytest.approx((0.1 + 0.2) / 2)

    def test_random_against_scalar(self):
        rs = np.random.default_rng(1)
        p, t, z = rs.random((3, 9)), rs.random((3, 9)), rs.standard_normal((3, 9)) * 3
        s = (rs.random((3, 9)) > 0.5).astype(float)
        m = rs.random((3, 9)) < 0.4
        m[2] = False  # one window with nothing masked
        m[0, 0] = True
        res = compute_loss(p, t, z, s, m)
        total, comps = scalar_loss(p, t, z, s, m, LossConfig())
        assert res.total == pytest.approx(total, rel=1e-12)
        assert all(v >= 0 for v in res.components.values())

    def test_gradients(self):
        rs = np.random.default_rng(2)
        p, t, z = rs.random((2, 8)), rs.random((2, 8)), rs.standard_normal((2, 8))
        s = (rs.random((2, 8)) > 0.5).astype(float)
        m = rs.random((2, 8)) < 0.6
        res = compute_loss(p, t, z, s, m)
        gp = finite_diff_grad(lambda v: compute_loss(v, t, z, s, m).total, p)
        gz = finite_diff_grad(lambda v: compute_loss(p, t, v, s, m).total, z)
        assert max_relative_error(res.d_power, gp) < 1e-6
        assert max_relative_error(res.d_status, gz) < 1e-6

    def test_nothing_masked_falls_back(self):
        rs = np.random.default_rng(3)
        p, t = rs.random((1, 5)), rs.random((1, 5))
        z, s = np.zeros((1, 5)), np.zeros((1, 5))
        res = compute_loss(p, t, z, s, np.zeros((1, 5), bool))
        full = compute_loss(p, t, z, s, np.ones((1, 5), bool))
        assert res.fallback and res.total == full.total

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            compute_loss(np.zeros((1, 4)), np.zeros((1, 5)), np.zeros((1, 4)), np.zeros((1, 4)),
                         np.ones((1, 4), bool))


class TestOptimizer:
    def test_zero_grad_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        adamw_step(p, {"w": np.zeros(2)}, OptimizerState(weight_decay=0.0))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_by_hand(self):
        p = {"w": np.array([0.5])}
        adamw_step(p, {"w": np.array([1.0])}, OptimizerState(lr=1e-4, weight_decay=0.0))
        # m_hat = 1, v_hat = 1
        assert p["w"][0] == pytest.approx(0.5 - 1e-4 / (1 + 1e-8), rel=1e-14)

    def test_decoupled_decay(self):
        p = {"w": np.array([2.0])}
        st = OptimizerState(lr=0.1, weight_decay=0.1)
        for k in range(1, 4):
            adamw_step(p, {"w": np.zeros(1)}, st)
            assert p["w"][0] == pytest.approx(2.0 * 0.99 ** k, rel=1e-14)

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError, match="layer.x"):
            adamw_step({"layer.x": np.ones(1)}, {"layer.x": np.array([np.nan])}, OptimizerState())

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_global_norm(g, 1.0) == 5.0
        assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
        g = {"a": np.array([0.3])}
        clip_global_norm(g, 1.0)
        assert g["a"][0] == 0.3


def small_model(mode="meta", **kw):
    return NilmModel(ModelConfig(window_len=32, hidden=8, mode=mode, **kw))


class TestTrain:
    def test_one_batch_changes_params(self):
        ds = tiny_dataset().subset(np.arange(4))
        m = small_model()
        before = {k: v.copy() for k, v in m.params.items()}
        train(m, ds, 1, TrainConfig(batch_size=8))
        assert any(not np.array_equal(before[k], v) for k, v in m.params.items())

    def test_deterministic_and_seed_sensitive(self):
        ds = tiny_dataset()
        cfg = TrainConfig(batch_size=32, lr=1e-3, log_wallclock=False)
        _, a = train(small_model(), ds, 2, cfg)
        _, b = train(small_model(), ds, 2, cfg)
        _, c = train(small_model(), ds, 2, TrainConfig(batch_size=32, lr=1e-3, seed=9,
                                                       log_wallclock=False))
        assert epoch_log_csv(a, 2) == epoch_log_csv(b, 2)
        assert epoch_log_csv(a, 2) != epoch_log_csv(c, 2)

    def test_learns_tiny_set(self):
        ds = tiny_dataset()
        _, logs = train(small_model("fixed:1", dropout=0.1), ds, 25,
                        TrainConfig(batch_size=16, lr=3e-3))
        assert logs[-1].total_loss <= 0.5 * logs[0].total_loss

    def test_meta_tau_logged_in_bounds(self):
        _, logs = train(small_model(), tiny_dataset(), 3, TrainConfig(batch_size=32, lr=1e-2))
        for e in logs:
            assert len(e.taus) == 2
            assert all(2 / 8 < t < 16 for t in e.taus)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        m = small_model("standard")
        m.params["head_power.bias"][0] = np.inf
        with pytest.raises(DivergenceError) as info:
            train(m, tiny_dataset(), 2, TrainConfig(batch_size=64))
        assert info.value.epoch == 1
        assert set(info.value.last_good) == set(m.params)

    def test_window_mismatch(self):
        with pytest.raises(ShapeError):
            train(NilmModel(ModelConfig(window_len=64, hidden=8)), tiny_dataset(), 1)

    def test_empty(self):
        with pytest.raises(DataError):
            train(small_model(), tiny_dataset().subset(np.arange(0)), 1)

    def test_log_csv(self):
        _, logs = train(small_model(), tiny_dataset().subset(np.arange(8)), 2,
                        TrainConfig(log_wallclock=False))
        lines = epoch_log_csv(logs, 2).splitlines()
        assert lines[0] == "epoch,total_loss,mse,kl,margin,l1on,tau_layer1,tau_layer2,seconds"
        assert len(lines) == 3 and lines[1].endswith(",0.000000")


class Oracle:
    def __init__(self, target):
        self.target = target

    def predict(self, aggregate):
        return self.target


class TestEvaluate:
    def test_perfect(self):
        ds = tiny_dataset()
        r = evaluate(Oracle(ds.target), ds)
        assert (r.acc, r.f1, r.mae, r.mre) == (1.0, 1.0, 0.0, 0.0)

    def test_all_off(self):
        ds = tiny_dataset()
        ds.target[:] = 0.0
        ds.status[:] = 0.0
        r = evaluate(Oracle(ds.target), ds)
        assert r.acc == 1.0 and r.f1 == 0.0 and r.degenerate_f1

    def test_matches_metrics(self):
        ds = tiny_dataset()
        pred = np.random.default_rng(4).random(ds.target.shape) * 1.2 - 0.1
        r = evaluate(Oracle(pred), ds)
        watts = np.maximum(pred * 400, 0)
        ref = report(watts, ds.target * 400, watts >= 50, ds.status > 0.5)
        assert r == ref

    def test_model_evaluation_runs(self):
        r = evaluate(small_model(), tiny_dataset())
        assert 0 <= r.acc <= 1 and r.n_samples == tiny_dataset().target.size
