import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcelab.calibration import ExpertBank, calibrated_score
from dcelab.estimators import (
    brute_force_ips_mean,
    brute_force_moments,
    calibration_bound_audit,
    clip_propensity,
    dr_bias,
    dr_calibrated,
    dr_estimator,
    dr_variance,
    eib_estimator,
    ideal_loss,
    ips_estimator,
    naive_estimator,
    snips_estimator,
)
from dcelab.models import error, error_pair
from oracles import dr_on_every_mask, enumerate_dr


def _instance(rng, n, p_low=0.05):
    return dict(
        e=rng.uniform(0, 2, n),
        e_hat=rng.uniform(0, 2, n),
        p=rng.uniform(p_low, 1, n),
        p_hat=rng.uniform(p_low, 1, n),
    )


class TestPointEstimators:
    def test_ideal(self):
        assert ideal_loss(np.zeros(4)) == 0.0
        assert ideal_loss([0.2, 0.4]) == pytest.approx(0.3, abs=1e-15)

    def test_naive(self, rng):
        assert naive_estimator([0.3, 0.7], [0, 1]) == 0.7
        e = rng.random((3, 4))
        assert naive_estimator(e, np.ones_like(e)) == pytest.approx(ideal_loss(e), abs=1e-15)
        with pytest.raises(ValueError):
            naive_estimator([0.1], [0])

    def test_naive_is_biased_when_low_error_pairs_are_exposed(self, rng):
        # exposure falls with the error, so observed pairs under-represent large errors
        e = rng.uniform(0, 1, 400)
        p = 0.9 - 0.8 * e
        gaps = [naive_estimator(e, rng.random(400) < p) - ideal_loss(e) for _ in range(50)]
        assert max(gaps) < 0

    def test_eib(self, rng):
        e, o = rng.random(6), rng.integers(0, 2, 6)
        assert eib_estimator(e, e, o) == pytest.approx(ideal_loss(e), abs=1e-15)
        assert eib_estimator(e, [0.5] * 6, np.zeros(6)) == 0.5
        assert eib_estimator(e, rng.random(6), np.ones(6)) == pytest.approx(ideal_loss(e), abs=1e-15)

    def test_ips(self, rng):
        e = rng.random(5)
        assert ips_estimator(e, np.ones(5), np.ones(5)) == pytest.approx(ideal_loss(e), abs=1e-15)
        assert ips_estimator([0.5], [0.25], [1]) == 2.0
        with pytest.raises(ValueError):
            ips_estimator([0.5], [0.0], [1])

    def test_ips_unbiased_under_true_propensity(self, rng):
        inst = _instance(rng, 10)
        mean = brute_force_ips_mean(inst["e"], inst["p"], inst["p"])
        assert mean == pytest.approx(ideal_loss(inst["e"]), abs=1e-12)

    def test_snips(self, rng):
        e, p, o = rng.random(6), rng.uniform(0.1, 1, 6), np.array([1, 0, 1, 1, 0, 1])
        assert snips_estimator(e, 3.7 * p, o) == pytest.approx(snips_estimator(e, p, o), rel=1e-14)
        assert snips_estimator(e, p, [0, 0, 1, 0, 0, 0]) == pytest.approx(e[2], abs=1e-15)
        assert snips_estimator(e, np.ones(6), np.ones(6)) == pytest.approx(ideal_loss(e), abs=1e-15)
        with pytest.raises(ValueError):
            snips_estimator(e, p, np.zeros(6))

    @given(c=st.floats(1e-3, 1e3), seed=st.integers(0, 10_000))
    def test_snips_scale_invariance(self, c, seed):
        rng = np.random.default_rng(seed)
        e, p = rng.random(8), rng.uniform(0.05, 1, 8)
        o = rng.integers(0, 2, 8)
        o[0] = 1
        assert snips_estimator(e, c * p, o) == pytest.approx(snips_estimator(e, p, o), rel=1e-12)

    def test_dr_examples(self, rng):
        e, p_hat, o = rng.random(7), rng.uniform(0.1, 1, 7), rng.integers(0, 2, 7)
        assert dr_estimator(e, e, p_hat, o) == pytest.approx(ideal_loss(e), abs=1e-15)
        e_hat = rng.random(7)
        assert dr_estimator(e, e_hat, p_hat, np.zeros(7)) == pytest.approx(e_hat.mean(), abs=1e-15)
        with pytest.raises(ValueError):
            dr_estimator(e, e, np.zeros(7), o)
        with pytest.raises(ValueError):
            dr_estimator(e, e[:3], p_hat, o)

    def test_clip(self):
        assert clip_propensity([0.01], 0.05)[0] == 0.05
        p = np.array([0.01, 0.3, 0.9])
        assert np.array_equal(clip_propensity(p, 0.0), p)
        assert np.all(clip_propensity(p, 0.2) >= p)
        with pytest.raises(ValueError):
            clip_propensity(p, 1.0)


class TestDoubleRobustness:
    def test_true_propensity_unbiased_for_any_imputation(self, rng):
        for _ in range(20):
            inst = _instance(rng, int(rng.integers(1, 13)))
            mean, _ = enumerate_dr(inst["e"], inst["e_hat"], inst["p"], inst["p"])
            assert mean == pytest.approx(ideal_loss(inst["e"]), abs=1e-12)

    def test_exact_imputation_pointwise(self, rng):
        for _ in range(10):
            n = int(rng.integers(1, 9))
            e, p_hat = rng.random(n), rng.uniform(0.05, 1, n)
            for _, v in dr_on_every_mask(e, e, p_hat):
                assert v == pytest.approx(ideal_loss(e), abs=1e-12)

    def test_single_pair(self):
        assert brute_force_moments([1.0], [0.0], [0.5], [0.5])[0] == pytest.approx(1.0, abs=1e-15)


class TestClosedFormMoments:
    def test_two_pair_example(self):
        args = ([1.0, 0.5], [0.0, 0.0], [0.5, 0.8], [0.25, 1.0])
        assert dr_bias(*args) == pytest.approx(0.45, abs=1e-12)
        assert dr_variance(*args) == pytest.approx(1.01, abs=1e-12)
        mean, var = enumerate_dr(*args)
        assert abs(mean - ideal_loss(args[0])) == pytest.approx(0.45, abs=1e-12)
        assert var == pytest.approx(1.01, abs=1e-12)

    def test_zero_cases(self, rng):
        inst = _instance(rng, 6)
        assert dr_bias(inst["e"], inst["e_hat"], inst["p"], inst["p"]) == 0.0
        assert dr_bias(inst["e"], inst["e"], inst["p"], inst["p_hat"]) == 0.0
        assert dr_variance(inst["e"], inst["e"], inst["p"], inst["p_hat"]) == 0.0
        assert brute_force_moments(inst["e"], inst["e"], inst["p"], inst["p_hat"])[1] == pytest.approx(0, abs=1e-15)

    def test_closed_forms_match_enumeration(self, rng):
        for _ in range(100):
            inst = _instance(rng, int(rng.integers(1, 13)))
            mean, var = brute_force_moments(**inst)
            ideal = ideal_loss(inst["e"])
            assert abs(abs(mean - ideal) - dr_bias(**inst)) <= 1e-10
            assert abs(var - dr_variance(**inst)) <= 1e-10

    def test_kernel_matches_pure_python_enumeration(self, rng):
        inst = _instance(rng, 10)
        np.testing.assert_allclose(brute_force_moments(**inst),
                                   enumerate_dr(inst["e"], inst["e_hat"], inst["p"], inst["p_hat"]),
                                   rtol=0, atol=1e-12)

    def test_enumeration_size_limit(self):
        with pytest.raises(ValueError):
            brute_force_moments(*[np.full(17, 0.5)] * 4)


def _bound_instance(rng, n, kind="bce"):
    r_hat = rng.uniform(0.02, 0.98, n)
    e0, e1 = error_pair(kind, r_hat)
    return dict(e0=e0, e1=e1, r_tilde=rng.random(n), p=rng.uniform(0.02, 1, n),
                p_hat=rng.uniform(0.02, 1, n), q=rng.random(n))


class TestBoundAudit:
    def test_randomized_audit(self, rng):
        worst = np.inf
        for _ in range(1000):
            inst = _bound_instance(rng, int(rng.integers(1, 101)), rng.choice(["bce", "mse"]))
            audit = calibration_bound_audit(**inst)
            assert audit.all_hold, audit.slack
            worst = min(worst, min(audit.slack.values()))
        assert worst >= -1e-12

    def test_exact_propensity(self, rng):
        inst = _bound_instance(rng, 20)
        inst["p_hat"] = inst["p"]
        audit = calibration_bound_audit(**inst)
        assert audit.bias == 0.0 and audit.all_hold

    def test_propensity_bound_is_tight(self, rng):
        # (e - e_hat) / p_hat = c everywhere and p_hat >= p: bias = |c| * ECE(p_hat)
        n, c = 30, 0.5
        p_hat = rng.uniform(0.2, 0.8, n)
        p = p_hat - rng.uniform(0.0, 0.15, n)
        r_tilde = np.full(n, 0.1)
        q = r_tilde + c * p_hat
        audit = calibration_bound_audit(np.zeros(n), np.ones(n), r_tilde, p, p_hat, q)
        assert audit.rho_max == pytest.approx(c, rel=1e-12)
        assert audit.bias == pytest.approx(c * audit.ece_propensity, rel=1e-12)
        assert abs(audit.slack["bias_le_rho_ece_prop"]) <= 1e-12

    @pytest.mark.parametrize("kind", ["bce", "mse"])
    def test_error_gap_factorizes(self, rng, kind):
        # e - e_hat = (q - r_tilde) * (e1 - e0) for soft-label errors
        r_hat, q, r_tilde = rng.uniform(0.01, 0.99, 50), rng.random(50), rng.random(50)
        e0, e1 = error_pair(kind, r_hat)
        lhs = error(kind, r_hat, q) - error(kind, r_hat, r_tilde)
        np.testing.assert_allclose(lhs, (q - r_tilde) * (e1 - e0), rtol=0, atol=1e-12)

    def test_audit_serializes(self, rng):
        audit = calibration_bound_audit(**_bound_instance(rng, 5))
        d = audit.to_dict()
        assert set(d["bounds"]) == set(d["holds"]) and len(d["bounds"]) == 6
        assert {"rho_max", "pi_max", "omega_max", "ece_propensity", "ece_imputation"} <= set(d)
        assert '"all_hold"' in audit.to_json()

    def test_counts_ties(self):
        n = 4
        audit = calibration_bound_audit(np.zeros(n), np.ones(n), np.full(n, 0.5), np.full(n, 0.5),
                               [0.3, 0.3, 0.4, 0.5], np.full(n, 0.5))
        assert audit.n_propensity_ties == 2


class TestCalibratedDR:
    def test_identity_experts_reproduce_plain_dr(self, rng):
        n = 40
        r_hat, r_tilde, p_hat = rng.uniform(0.05, 0.95, (3, n))
        r = rng.integers(0, 2, n).astype(float)
        o = rng.integers(0, 2, n)
        emb = rng.normal(size=(n, 3))
        bank = ExpertBank.identity(3, 3, rng)
        r_bar = calibrated_score(bank, emb, r_tilde, tau=0.5, rng=rng)
        p_bar = calibrated_score(bank, emb, p_hat, tau=0.5, rng=rng)
        e = error("bce", r_hat, r)
        plain = dr_estimator(e, error("bce", r_hat, r_tilde), p_hat, o)
        assert dr_calibrated(e, error("bce", r_hat, r_bar), p_bar, o) == plain

    def test_exact_imputation(self, rng):
        e, p, o = rng.random(9), rng.uniform(0.1, 1, 9), rng.integers(0, 2, 9)
        assert dr_calibrated(e, e, p, o) == pytest.approx(ideal_loss(e), abs=1e-15)

    def test_difference_is_through_calibrated_inputs(self, rng):
        n = 25
        e, e_hat, e_bar = rng.random((3, n))
        p_hat, p_bar = rng.uniform(0.1, 1, (2, n))
        o = rng.integers(0, 2, n)
        diff = dr_calibrated(e, e_bar, p_bar, o) - dr_estimator(e, e_hat, p_hat, o)
        by_hand = np.mean((e_bar - e_hat) + o * ((e - e_bar) / p_bar - (e - e_hat) / p_hat))
        assert diff == pytest.approx(by_hand, abs=1e-14)
