import dataclasses

import numpy as np
import pytest

from dcelab.calibration import ExpertBank, bank_score_grid, ece_pairwise
from dcelab.data import DataError, InteractionTable, Split, SynthConfig, generate_synthetic, split_validation
from dcelab.models import AdamState, FactorModel, adam_step, error, gradient, heuristic_propensity
from dcelab.training import (
    DivergenceError,
    TrainConfig,
    _streams,
    _validation_loss,
    loss_imp_cal,
    loss_pred_dr_cal,
    pretrain_propensity_stack,
    train_dr_jl,
    train_method,
    train_propensity,
    train_simple,
    trilevel_train,
)
from oracles import central_diff, rel_error

SMALL = TrainConfig(epochs=3, batch_size=64, dim=4, k_experts=2, prop_epochs=3, prop_bank_epochs=5, seed=1)


@pytest.fixture(scope="module")
def small_data():
    table, gt = generate_synthetic(SynthConfig(n_users=40, n_items=30, seed=2, popularity_skew=2.0))
    split = split_validation(table, SMALL.val_fraction, 1, SMALL.negative_rate)
    return table, gt, split


def _model(rng, n_users=5, n_items=4, dim=3):
    m = FactorModel.init(n_users, n_items, dim, rng, scale=0.7)
    m.user_bias[:] = rng.normal(scale=0.3, size=n_users)
    return m


def _same_params(a, b):
    return all(np.array_equal(v, b.params()[k]) for k, v in a.params().items())


class TestImputationLoss:
    @pytest.mark.parametrize("kind", ["bce", "mse"])
    def test_finite_differences(self, rng, kind):
        phi = _model(rng)
        n = 10
        u, i = rng.integers(0, 5, n), rng.integers(0, 4, n)
        r_hat, r, p = rng.uniform(0.05, 0.95, n), rng.integers(0, 2, n), rng.uniform(0.2, 1, n)
        _, g = loss_imp_cal(phi, r_hat, p, u, i, r, kind, n_domain=50)
        num = central_diff(lambda: loss_imp_cal(phi, r_hat, p, u, i, r, kind, n_domain=50)[0],
                           list(phi.params().values()))
        for name, a in zip(phi.params(), num):
            assert rel_error(g[name], a) <= 1e-4, name

    def test_single_pair_value(self):
        # MSE with r_hat 0.3: e(.,1) - e(.,0) = 0.4, so r_tilde 0.5 vs r 1 gives a gap of 0.2
        phi = FactorModel(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1), np.zeros(1))
        loss, _ = loss_imp_cal(phi, [0.3], [0.5], [0], [0], [1.0], "mse", n_domain=10)
        assert loss == pytest.approx(0.08 / 10, abs=1e-15)

    def test_zero_when_errors_agree(self):
        phi = FactorModel(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1), np.zeros(1))
        # at r_hat = 0.5 the squared error does not depend on the label
        loss, g = loss_imp_cal(phi, [0.5], [0.3], [0], [0], [1.0], "mse")
        assert loss == 0.0 and not any(v.any() for v in g.values())

    def test_rejects_zero_propensity(self, rng):
        with pytest.raises(ValueError):
            loss_imp_cal(_model(rng), [0.5], [0.0], [0], [0], [1.0])


class TestPredictionLoss:
    @pytest.mark.parametrize("kind", ["bce", "mse"])
    def test_finite_differences(self, rng, kind):
        theta = _model(rng)
        n = 12
        u, i = rng.integers(0, 5, n), rng.integers(0, 4, n)
        r_bar, p_bar = rng.uniform(0.05, 0.95, n), rng.uniform(0.2, 1, n)
        o, r = rng.integers(0, 2, n), rng.integers(0, 2, n)
        _, g = loss_pred_dr_cal(theta, r_bar, p_bar, u, i, o, r, kind)
        num = central_diff(lambda: loss_pred_dr_cal(theta, r_bar, p_bar, u, i, o, r, kind)[0],
                           list(theta.params().values()))
        for name, a in zip(theta.params(), num):
            assert rel_error(g[name], a) <= 1e-4, name

    def test_fully_observed_is_supervised(self, rng):
        theta = _model(rng)
        u, i, r = [0, 1, 2, 3], [0, 1, 2, 3], np.array([1.0, 0.0, 1.0, 1.0])
        loss, g = loss_pred_dr_cal(theta, r, np.full(4, 0.37), u, i, np.ones(4), r)
        assert loss == pytest.approx(np.mean(error("bce", theta.score(u, i), r)), abs=1e-12)
        ref = gradient(theta, u, i, r, np.full(4, 0.25))
        for k in g:
            np.testing.assert_allclose(g[k], ref[k], rtol=1e-10, atol=1e-14)

    def test_fully_unobserved_fits_pseudo_labels(self, rng):
        theta = _model(rng)
        u, i = [0, 1, 4], [3, 1, 2]
        r_bar = np.array([0.2, 0.7, 0.9])
        loss, g = loss_pred_dr_cal(theta, r_bar, np.full(3, 0.5), u, i, np.zeros(3), [1, 1, 1])
        assert loss == pytest.approx(np.mean(error("bce", theta.score(u, i), r_bar)), abs=1e-12)
        ref = gradient(theta, u, i, r_bar, np.full(3, 1 / 3))
        for k in g:
            np.testing.assert_allclose(g[k], ref[k], rtol=1e-10, atol=1e-14)


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(k_experts=0),
                                     dict(error_kind="hinge"), dict(impcal_form="other")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_schedule_ends_at_terminal_temperature(self):
        s = TrainConfig(epochs=5).schedule()
        assert s.total_epochs == 4 and s.tq == 1e-3


class TestPropensityStack:
    def test_deterministic(self, small_data):
        table, _, split = small_data
        a = pretrain_propensity_stack(table, split, SMALL)
        b = pretrain_propensity_stack(table, split, SMALL)
        assert _same_params(a[0], b[0]) and all(np.array_equal(x, y) for x, y in
                                               zip(a[1].params().values(), b[1].params().values()))

    def test_calibration_and_heuristic_ordering(self):
        # model-based propensities beat item popularity, and the experts improve on the raw classifier
        table, gt = generate_synthetic(SynthConfig(n_users=120, n_items=80, seed=0, popularity_skew=2.0))
        cfg = TrainConfig(seed=0)
        split = split_validation(table, cfg.val_fraction, 0, cfg.negative_rate)
        psi, bank = pretrain_propensity_stack(table, split, cfg)
        raw = ece_pairwise(gt.p, psi.score_grid())
        cal = ece_pairwise(gt.p, bank_score_grid(bank, psi))
        heur = ece_pairwise(gt.p, heuristic_propensity(table))
        assert cal < raw < heur


class TestJointTraining:
    def test_history_and_callback(self, small_data):
        table, _, split = small_data
        seen = []
        stack = trilevel_train(table, split, SMALL, callback=lambda e, s: seen.append(e))
        assert seen == [0, 1, 2] and len(stack.history) == 3
        keys = {"epoch", "tau", "imp_loss", "pred_loss", "impcal_loss", "impcal_coef_above_one", "val_loss"}
        assert all(keys == set(h) for h in stack.history)
        assert all(np.isfinite(h["pred_loss"]) for h in stack.history)
        assert stack.history[0]["tau"] == 1.0 and stack.history[-1]["tau"] == 1e-3

    def test_propensity_stack_stays_frozen(self, small_data):
        table, _, split = small_data
        psi, bank = pretrain_propensity_stack(table, split, SMALL)
        psi0, bank0 = psi.copy(), bank.copy()
        stack = trilevel_train(table, split, SMALL, psi=psi, prop_bank=bank)
        assert _same_params(stack.psi, psi0)
        assert all(np.array_equal(v, bank0.params()[k]) for k, v in stack.prop_bank.params().items())

    def test_deterministic(self, small_data):
        table, _, split = small_data
        a = trilevel_train(table, split, SMALL)
        b = trilevel_train(table, split, SMALL)
        assert _same_params(a.theta, b.theta) and _same_params(a.phi, b.phi)
        assert a.history == b.history
        c = train_dr_jl(table, split, SMALL)
        d = train_dr_jl(table, split, SMALL)
        assert _same_params(c.theta, d.theta)

    def test_identity_experts_reproduce_dr_jl(self, small_data):
        table, _, split = small_data
        cfg = dataclasses.replace(SMALL, k_experts=1, lr_imp_bank=0.0, rescale_train_propensity=False)
        psi = train_propensity(table, split, cfg)
        ident = ExpertBank.identity(1, cfg.dim, 0)
        dce = trilevel_train(table, split, cfg, psi=psi, prop_bank=ident, record_trajectory=True)
        jl = train_dr_jl(table, split, cfg, psi=psi, record_trajectory=True)
        assert len(dce.trajectory) == len(jl.trajectory) > 0
        worst = 0.0
        for (t1, p1), (t2, p2) in zip(dce.trajectory, jl.trajectory):
            for m1, m2 in ((t1, t2), (p1, p2)):
                for k, v in m1.params().items():
                    worst = max(worst, float(np.max(np.abs(v - m2.params()[k]))))
        assert worst <= 1e-10

    def test_full_observation_degenerates_to_supervised_mf(self):
        table, _ = generate_synthetic(SynthConfig(n_users=12, n_items=10, propensity_floor=1.0, seed=4))
        one = InteractionTable(12, 10, table.users[:1], table.items[:1], table.ratings[:1])
        split = Split(table, one, one.users, one.items, np.ones(1))
        cfg = TrainConfig(epochs=4, batch_size=16, dim=4, seed=3)
        jl = train_dr_jl(table, split, cfg, propensity_grid=np.ones((12, 10)))

        # plain MF on the same batch schedule
        rngs = _streams(cfg.seed)
        theta = FactorModel.init(12, 10, cfg.dim, rngs["theta"], cfg.init_scale, "prediction")
        FactorModel.init(12, 10, cfg.dim, rngs["phi"], cfg.init_scale)
        opt = AdamState(lr=cfg.lr_pred, weight_decay=cfg.wd_pred)
        ratings = table.rating_grid().ravel()
        domain = int(np.ceil(cfg.batch_size * 120 / 120))
        for _ in range(cfg.epochs):
            order = rngs["batches"].permutation(table.n_observed)
            for _ in range(0, table.n_observed, cfg.batch_size):
                flat = rngs["domain"].integers(0, 120, size=domain)
                u, i = np.divmod(flat, 10)
                adam_step(theta.params(), opt, gradient(theta, u, i, ratings[flat], np.full(flat.size, 1 / flat.size)))
        grid = table.rating_grid()
        mse_jl = np.mean((jl.theta.score_grid() - grid) ** 2)
        mse_mf = np.mean((theta.score_grid() - grid) ** 2)
        assert abs(mse_jl - mse_mf) <= 1e-6

    def test_divergence_guard(self, small_data):
        table, _, split = small_data
        bad = np.full((table.n_users, table.n_items), np.nan)
        with pytest.raises(DivergenceError):
            train_dr_jl(table, split, SMALL, propensity_grid=bad)

    def test_early_stopping_keeps_best(self, small_data):
        table, _, split = small_data
        cfg = dataclasses.replace(SMALL, epochs=8, patience=2, lr_pred=0.05)
        stack = train_dr_jl(table, split, cfg)
        best = min(h["val_loss"] for h in stack.history)
        p_flat = stack.propensity_grid.ravel()
        restored = _validation_loss(stack.theta, stack.phi, None, p_flat, split, table.n_items, "bce")
        assert restored == pytest.approx(best, rel=1e-12)

    def test_empty_training_split_rejected(self, small_data):
        table, _, split = small_data
        empty = InteractionTable(table.n_users, table.n_items, [], [], [])
        with pytest.raises(DataError):
            train_simple("naive", table, dataclasses.replace(split, train=empty), SMALL)


class TestBaselines:
    @pytest.mark.parametrize("method", ["naive", "eib", "ips", "snips", "dr-jl"])
    def test_each_method_trains(self, small_data, method):
        table, _, split = small_data
        stack = train_method(method, table, split, SMALL)
        assert len(stack.history) == SMALL.epochs
        assert np.all(np.isfinite(stack.theta.score_grid()))
        assert (stack.psi is None) == (method in ("naive", "eib"))

    def test_unknown_method(self, small_data):
        table, _, split = small_data
        with pytest.raises(ValueError):
            train_method("mrdr", table, split, SMALL)
        with pytest.raises(ValueError):
            train_simple("ips", table, split, SMALL)

    def test_naive_learns_observed_ratings(self, small_data):
        table, _, split = small_data
        before = FactorModel.init(table.n_users, table.n_items, SMALL.dim, _streams(SMALL.seed)["theta"],
                                  SMALL.init_scale)
        stack = train_simple("naive", table, split, dataclasses.replace(SMALL, epochs=20, wd_pred=0.0))
        tr = split.train

        def nll(m):
            return np.mean(error("bce", m.score(tr.users, tr.items), tr.ratings))

        assert nll(stack.theta) < nll(before)
