"""Ready-made synthetic experiments shared by the CLI, tests and benchmarks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .calibration import ExpertBank, TemperatureSchedule, bank_score_grid, ece_pairwise, fit_experts
from .data import SynthConfig, generate_synthetic, split_validation, unbiased_test_set
from .metrics import evaluate
from .models import FactorModel
from .training import TrainConfig, pretrain_propensity_stack, train_dr_jl, train_propensity, train_simple, trilevel_train

# Dense, strongly preference-driven exposure: about a third of the grid is
# observed and positives are heavily over-represented among observations.
BENCHMARK_SYNTH = dict(
    n_users=500,
    n_items=300,
    latent_dim=4,
    popularity_skew=2.0,
    preference_strength=8.0,
    exposure_offset=-2.0,
)

TEST_ITEMS_PER_USER = 16


def benchmark_synth(seed: int, **overrides) -> SynthConfig:
    return SynthConfig(**{**BENCHMARK_SYNTH, "seed": seed, **overrides})


def distort_by_group(model: FactorModel, groups, scales) -> FactorModel:
    """Scale each user's logits by ``scales[groups[u]]``.

    The result is again a factor model: user rows become
    ``[s * P_u, s, s * b_u]`` and item rows ``[Q_i, b_i + b, 1]`` with zero
    biases, so the user embedding carries the group's scale.
    """
    groups = np.asarray(groups)
    s = np.asarray(scales, dtype=np.float64)[groups][:, None]
    users = np.hstack([s * model.user_factors, s, s * model.user_bias[:, None]])
    items = np.hstack([
        model.item_factors,
        (model.item_bias + model.global_bias[0])[:, None],
        np.ones((model.n_items, 1)),
    ])
    return FactorModel(users, items, np.zeros(model.n_users), np.zeros(model.n_items), np.zeros(1), model.role)


@dataclass
class GroupCalibrationResult:
    seed: int
    ece_raw: float
    ece_global: float
    ece_experts: float

    @property
    def reduction(self) -> float:
        return 1.0 - self.ece_experts / self.ece_raw


def two_group_calibration(seed: int, scales=(2.5, 0.4), cfg: TrainConfig | None = None,
                          synth: SynthConfig | None = None) -> GroupCalibrationResult:
    """Propensity experts on a scorer that is over-confident for half the users and under-confident for the rest.

    Fits a ``K=2`` bank and a single global Platt map on D_val and reports
    pairwise ECE of each against the true propensities.
    """
    cfg = cfg or TrainConfig(seed=seed)
    synth = synth or benchmark_synth(seed)
    table, gt = generate_synthetic(synth)
    split = split_validation(table, cfg.val_fraction, seed, cfg.negative_rate)
    psi = train_propensity(table, split, cfg)
    rng = np.random.default_rng([seed, 7])
    groups = rng.permutation(np.arange(table.n_users) % 2)
    distorted = distort_by_group(psi, groups, scales)
    sched = TemperatureSchedule(cfg.t0, cfg.tq, max(cfg.prop_bank_epochs - 1, 1))
    eces = {}
    for k in (1, 2):
        bank = ExpertBank.identity(k, distorted.dim, rng, role="propensity")
        fit_experts(
            bank, distorted, split.dval_users, split.dval_items, split.dval_o,
            loss="prop", schedule=sched, epochs=cfg.prop_bank_epochs,
            batch_size=cfg.calib_batch_size, lr=cfg.lr_prop_bank, seed=rng,
        )
        eces[k] = ece_pairwise(gt.p, bank_score_grid(bank, distorted))
    return GroupCalibrationResult(seed, ece_pairwise(gt.p, distorted.score_grid()), eces[1], eces[2])


def compare_methods(seed: int, cfg: TrainConfig | None = None, synth: SynthConfig | None = None,
                    methods=("naive", "dr-jl", "dce-dr")) -> dict:
    """Unbiased-test MetricReports per method on one seed, sharing the propensity stack."""
    cfg = cfg or TrainConfig(seed=seed)
    if cfg.seed != seed:
        cfg = dataclasses.replace(cfg, seed=seed)
    table, gt = generate_synthetic(synth or benchmark_synth(seed))
    split = split_validation(table, cfg.val_fraction, seed, cfg.negative_rate)
    test = unbiased_test_set(gt, TEST_ITEMS_PER_USER, seed + 1000)
    psi = prop_bank = None
    if {"dr-jl", "dce-dr", "ips", "snips"} & set(methods):
        psi, prop_bank = pretrain_propensity_stack(table, split, cfg)
    out = {}
    for method in methods:
        if method == "dce-dr":
            stack = trilevel_train(table, split, cfg, psi=psi, prop_bank=prop_bank)
        elif method == "dr-jl":
            stack = train_dr_jl(table, split, cfg, psi=psi)
        elif method in ("ips", "snips"):
            stack = train_simple(method, table, split, cfg, propensity_grid=psi.score_grid())
        else:
            stack = train_simple(method, table, split, cfg)
        out[method] = evaluate(test.users, stack.theta.score(test.users, test.items), test.ratings)
    return out
