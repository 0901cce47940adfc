"""Joint learning of prediction, imputation and calibration components.

``trilevel_train`` runs the doubly calibrated loop: for each observed
mini-batch it updates the imputation model with the propensity-weighted
imputation loss, then the prediction model with the calibrated DR loss on a
uniform sample of the whole grid; after the observed pass it updates the
imputation calibration experts on the observed validation pairs.
``train_dr_jl`` is the same loop with raw propensities and raw pseudo
labels and no calibration pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import (
    IMPCAL_FORMS,
    ExpertBank,
    TemperatureSchedule,
    bank_score_grid,
    calibrated_score,
    fit_experts,
    loss_impcal,
    temperature,
)
from .data import DataError, InteractionTable, Split
from .estimators import clip_propensity
from .models import (
    EPS_LOG,
    AdamState,
    ErrorKind,
    FactorModel,
    adam_step,
    backward,
    clamp_prob,
    error,
    error_dlogit,
    error_dtarget,
    heuristic_imputed_error,
    sigmoid,
    train_propensity_classifier,
)

logger = logging.getLogger(__name__)

METHODS = ("naive", "eib", "ips", "snips", "dr-jl", "dce-dr")


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    calib_batch_size: int = 1024
    domain_batch_size: int | None = None  # None: batch_size * |D| / |O_train|
    dim: int = 16
    k_experts: int = 5
    lr_pred: float = 0.01
    wd_pred: float = 0.5
    lr_imp: float = 0.01
    wd_imp: float = 0.03
    lr_imp_bank: float = 1e-3
    wd_imp_bank: float = 0.0
    lr_prop: float = 0.01
    wd_prop: float = 0.5
    lr_prop_bank: float = 0.05
    wd_prop_bank: float = 0.0
    prop_epochs: int = 10
    prop_batch_size: int = 1024
    prop_negatives: float = 4.0
    prop_full_complement: bool = False
    prop_bank_epochs: int = 30
    val_fraction: float = 0.1
    dval_negative_rate: float | None = None  # None: use val_fraction
    t0: float = 1.0
    tq: float = 1e-3
    error_kind: str = "bce"
    impcal_form: str = "label-weight"
    clip_threshold: float | None = None
    rescale_train_propensity: bool = True
    patience: int | None = None
    init_scale: float = 0.1
    eib_omega: float = 1.0
    eib_gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.calib_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.k_experts < 1:
            raise ValueError("k_experts must be >= 1")
        for name in ("lr_pred", "wd_pred", "lr_imp", "wd_imp", "lr_imp_bank", "wd_imp_bank",
                     "lr_prop", "wd_prop", "lr_prop_bank", "wd_prop_bank"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        ErrorKind(self.error_kind)
        if self.impcal_form not in IMPCAL_FORMS:
            raise ValueError(f"impcal_form must be one of {IMPCAL_FORMS}")

    @property
    def negative_rate(self) -> float:
        return self.val_fraction if self.dval_negative_rate is None else self.dval_negative_rate

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.t0, self.tq, max(self.epochs - 1, 1))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedStack:
    method: str
    theta: FactorModel
    phi: FactorModel | None = None
    psi: FactorModel | None = None
    prop_bank: ExpertBank | None = None
    imp_bank: ExpertBank | None = None
    propensity_grid: np.ndarray | None = None
    history: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)


def _streams(seed):
    """Independent RNG streams so calibrated and uncalibrated runs share schedules."""
    names = ("theta", "phi", "batches", "domain", "gumbel", "psi", "prop_bank", "imp_bank")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _guard(value, what):
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became non-finite")


def _guard_scores(scores, what):
    if not np.all(np.isfinite(scores)):
        raise DivergenceError(f"{what} became non-finite")
    return scores


def loss_imp_cal(phi: FactorModel, r_hat, p_bar, users, items, r, kind=ErrorKind.BCE, n_domain=None):
    """Propensity-weighted squared gap between imputed and observed errors.

    ``sum o * (e(r_hat, r_tilde) - e(r_hat, r))**2 / p_bar / n_domain`` over
    observed pairs, with ``r_tilde = phi(u, i)``. Returns the loss and its
    gradient with respect to ``phi`` only.
    """
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if np.any(p_bar <= 0):
        raise ValueError("propensities must be positive")
    n_domain = len(users) if n_domain is None else n_domain
    s = sigmoid(phi.logits(users, items))
    r_tilde = clamp_prob(s)
    diff = error(kind, r_hat, r_tilde) - error(kind, r_hat, r)
    loss = float(np.sum(diff**2 / p_bar) / n_domain)
    inside = (s > EPS_LOG) & (s < 1.0 - EPS_LOG)
    coef = np.where(inside, 2.0 * diff / p_bar * error_dtarget(kind, r_hat) * s * (1.0 - s), 0.0) / n_domain
    return loss, backward(phi, users, items, coef)


def loss_pred_dr_cal(theta: FactorModel, r_bar, p_bar, users, items, o, r, kind=ErrorKind.BCE):
    """Mini-batch DR loss ``mean(e_bar + o * (e - e_bar) / p_bar)`` and its gradient w.r.t. ``theta``.

    ``e_bar = e(r_hat, r_bar)`` is recomputed from the current predictions;
    ``r_bar`` and ``p_bar`` are constants. ``r`` is ignored where ``o == 0``.
    """
    o = np.asarray(o, dtype=np.float64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    r = np.where(o > 0, np.asarray(r, dtype=np.float64), 0.0)
    n = o.size
    s = sigmoid(theta.logits(users, items))
    r_hat = clamp_prob(s)
    e_bar = error(kind, r_hat, r_bar)
    e = error(kind, r_hat, r)
    w = o / p_bar
    loss = float(np.mean(e_bar + w * (e - e_bar)))
    coef = ((1.0 - w) * error_dlogit(kind, s, r_bar) + w * error_dlogit(kind, s, r)) / n
    return loss, backward(theta, users, items, coef)


def train_propensity(table: InteractionTable, split: Split, cfg: TrainConfig) -> FactorModel:
    """``h_psi``: training observations against never-observed pairs."""
    return train_propensity_classifier(
        split.train,
        negatives_per_positive=cfg.prop_negatives,
        epochs=cfg.prop_epochs,
        dim=cfg.dim,
        lr=cfg.lr_prop,
        weight_decay=cfg.wd_prop,
        batch_size=cfg.prop_batch_size,
        seed=_streams(cfg.seed)["psi"],
        exclude_mask=table.mask(),
        full_complement=cfg.prop_full_complement,
    )


def pretrain_propensity_stack(table: InteractionTable, split: Split, cfg: TrainConfig, k=None):
    """Train ``h_psi``, then fit the propensity experts on D_val with ``h_psi`` frozen.

    Returns ``(psi, prop_bank)``; both are treated as frozen afterwards.
    """
    rngs = _streams(cfg.seed)
    psi = train_propensity(table, split, cfg)
    bank = ExpertBank.identity(k or cfg.k_experts, cfg.dim, rngs["prop_bank"], role="propensity")
    fit_experts(
        bank, psi, split.dval_users, split.dval_items, split.dval_o,
        loss="prop",
        schedule=TemperatureSchedule(cfg.t0, cfg.tq, max(cfg.prop_bank_epochs - 1, 1)),
        epochs=cfg.prop_bank_epochs,
        batch_size=cfg.calib_batch_size,
        lr=cfg.lr_prop_bank,
        weight_decay=cfg.wd_prop_bank,
        seed=rngs["prop_bank"],
    )
    return psi, bank


def _prepare(table: InteractionTable, split: Split):
    if split.train.n_observed == 0:
        raise DataError("no training observations")
    n_items = table.n_items
    n_pairs = table.n_pairs
    o_flat = np.zeros(n_pairs)
    o_flat[split.train.flat_index] = 1.0
    r_flat = np.zeros(n_pairs)
    r_flat[split.train.flat_index] = split.train.ratings
    return n_items, n_pairs, o_flat, r_flat


def _validation_loss(theta, phi, imp_bank, p_flat, split, n_items, kind):
    """DR loss restricted to the observed validation pairs (all have ``o = 1``)."""
    val = split.val
    r_hat = theta.score(val.users, val.items)
    pseudo = phi.score(val.users, val.items)
    if imp_bank is not None:
        pseudo = calibrated_score(imp_bank, phi.user_factors[val.users], pseudo, mode="eval")
    e_bar = error(kind, r_hat, pseudo)
    e = error(kind, r_hat, val.ratings)
    p = p_flat[val.flat_index]
    return float(np.mean(e_bar + (e - e_bar) / p))


def _joint_train(
    table: InteractionTable,
    split: Split,
    cfg: TrainConfig,
    p_grid: np.ndarray,
    imp_bank: ExpertBank | None,
    method: str,
    record_trajectory: bool = False,
    callback=None,
) -> TrainedStack:
    kind = ErrorKind(cfg.error_kind)
    rngs = _streams(cfg.seed)
    n_items, n_pairs, o_flat, r_flat = _prepare(table, split)
    theta = FactorModel.init(table.n_users, n_items, cfg.dim, rngs["theta"], cfg.init_scale, "prediction")
    phi = FactorModel.init(table.n_users, n_items, cfg.dim, rngs["phi"], cfg.init_scale, "imputation")
    opt_theta = AdamState(lr=cfg.lr_pred, weight_decay=cfg.wd_pred)
    opt_phi = AdamState(lr=cfg.lr_imp, weight_decay=cfg.wd_imp)
    opt_bank = AdamState(lr=cfg.lr_imp_bank, weight_decay=cfg.wd_imp_bank)
    if cfg.clip_threshold is not None:
        p_grid = clip_propensity(p_grid, cfg.clip_threshold)
    p_flat = np.ascontiguousarray(p_grid, dtype=np.float64).ravel()
    train = split.train
    n_obs = train.n_observed
    domain_batch = cfg.domain_batch_size or max(1, int(math.ceil(cfg.batch_size * n_pairs / n_obs)))
    schedule = cfg.schedule()
    stack = TrainedStack(method, theta, phi, imp_bank=imp_bank, propensity_grid=p_grid)
    best = (math.inf, None)
    stale = 0
    for epoch in range(cfg.epochs):
        tau = temperature(schedule, min(epoch, schedule.total_epochs))
        order = rngs["batches"].permutation(n_obs)
        imp_total = pred_total = 0.0
        n_steps = 0
        for start in range(0, n_obs, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            u, i, r = train.users[idx], train.items[idx], train.ratings[idx]
            r_hat = _guard_scores(theta.score(u, i), "prediction scores")
            imp_loss, g_phi = loss_imp_cal(phi, r_hat, p_flat[train.flat_index[idx]], u, i, r, kind)
            _guard(imp_loss, "imputation loss")
            adam_step(phi.params(), opt_phi, g_phi)

            flat = rngs["domain"].integers(0, n_pairs, size=domain_batch)
            du, di = np.divmod(flat, n_items)
            pseudo = _guard_scores(phi.score(du, di), "imputation scores")
            if imp_bank is not None:
                pseudo = calibrated_score(imp_bank, phi.user_factors[du], pseudo, tau, rngs["gumbel"], users=du)
            pred_loss, g_theta = loss_pred_dr_cal(theta, pseudo, p_flat[flat], du, di, o_flat[flat], r_flat[flat], kind)
            _guard(pred_loss, "prediction loss")
            adam_step(theta.params(), opt_theta, g_theta)
            imp_total += imp_loss
            pred_total += pred_loss
            n_steps += 1
            if record_trajectory:
                stack.trajectory.append((theta.copy(), phi.copy()))

        cal_total, n_over = 0.0, 0
        if imp_bank is not None and cfg.lr_imp_bank > 0:
            val = split.val
            vorder = rngs["batches"].permutation(val.n_observed)
            for start in range(0, val.n_observed, cfg.calib_batch_size):
                idx = vorder[start : start + cfg.calib_batch_size]
                res = loss_impcal(
                    imp_bank, phi, val.users[idx], val.items[idx], val.ratings[idx],
                    p_flat[val.flat_index[idx]], tau, rngs["gumbel"], form=cfg.impcal_form,
                )
                _guard(res.loss, "imputation calibration loss")
                adam_step(imp_bank.params(), opt_bank, res.grads)
                cal_total += res.loss * idx.size
                n_over += res.n_coef_above_one
            cal_total /= val.n_observed
        val_loss = _validation_loss(theta, phi, imp_bank, p_flat, split, n_items, kind)
        record = {
            "epoch": epoch,
            "tau": tau,
            "imp_loss": imp_total / n_steps,
            "pred_loss": pred_total / n_steps,
            "impcal_loss": cal_total,
            "impcal_coef_above_one": n_over,
            "val_loss": val_loss,
        }
        stack.history.append(record)
        logger.info("%s epoch %d: %s", method, epoch, record)
        if callback is not None:
            callback(epoch, stack)
        if cfg.patience is not None:
            if val_loss < best[0]:
                snapshot = (theta.copy(), phi.copy(), None if imp_bank is None else imp_bank.copy())
                best = (val_loss, snapshot)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if cfg.patience is not None and best[1] is not None:
        stack.theta, stack.phi, best_bank = best[1]
        if best_bank is not None:
            stack.imp_bank = best_bank
    return stack


def _train_propensity_scale(split: Split) -> float:
    n_train, n_val = split.train.n_observed, split.val.n_observed
    return n_train / (n_train + n_val)


def trilevel_train(
    table: InteractionTable,
    split: Split,
    cfg: TrainConfig,
    psi: FactorModel | None = None,
    prop_bank: ExpertBank | None = None,
    imp_bank: ExpertBank | None = None,
    record_trajectory: bool = False,
    callback=None,
) -> TrainedStack:
    """Doubly calibrated joint training on top of a frozen propensity stack.

    Missing ``psi``/``prop_bank`` are pretrained here. The calibrated
    propensity uses the argmax expert per user, since the propensity bank is
    frozen.
    """
    if psi is None or prop_bank is None:
        psi, prop_bank = pretrain_propensity_stack(table, split, cfg)
    p_grid = bank_score_grid(prop_bank, psi)
    if cfg.rescale_train_propensity:
        p_grid = p_grid * _train_propensity_scale(split)
    if imp_bank is None:
        imp_bank = ExpertBank.identity(cfg.k_experts, cfg.dim, _streams(cfg.seed)["imp_bank"], role="imputation")
    stack = _joint_train(table, split, cfg, p_grid, imp_bank, "dce-dr", record_trajectory, callback)
    stack.psi, stack.prop_bank = psi, prop_bank
    return stack


def train_dr_jl(
    table: InteractionTable,
    split: Split,
    cfg: TrainConfig,
    psi: FactorModel | None = None,
    propensity_grid=None,
    record_trajectory: bool = False,
    callback=None,
) -> TrainedStack:
    """DR joint learning with the raw propensity model and uncalibrated pseudo labels."""
    if propensity_grid is None:
        if psi is None:
            psi = train_propensity(table, split, cfg)
        propensity_grid = psi.score_grid()
    stack = _joint_train(table, split, cfg, np.asarray(propensity_grid, dtype=np.float64), None,
                         "dr-jl", record_trajectory, callback)
    stack.psi = psi
    return stack


def train_simple(
    method: str,
    table: InteractionTable,
    split: Split,
    cfg: TrainConfig,
    propensity_grid=None,
    callback=None,
) -> TrainedStack:
    """Single-model baselines: naive, IPS, SNIPS and EIB (heuristic imputed error)."""
    if method not in ("naive", "ips", "snips", "eib"):
        raise ValueError(f"not a single-model method: {method}")
    kind = ErrorKind(cfg.error_kind)
    rngs = _streams(cfg.seed)
    n_items, n_pairs, o_flat, r_flat = _prepare(table, split)
    theta = FactorModel.init(table.n_users, n_items, cfg.dim, rngs["theta"], cfg.init_scale, "prediction")
    opt = AdamState(lr=cfg.lr_pred, weight_decay=cfg.wd_pred)
    train = split.train
    n_obs = train.n_observed
    domain_batch = cfg.domain_batch_size or max(1, int(math.ceil(cfg.batch_size * n_pairs / n_obs)))
    if method in ("ips", "snips"):
        if propensity_grid is None:
            raise ValueError(f"{method} needs a propensity grid")
        p_flat = np.asarray(propensity_grid, dtype=np.float64).ravel()
        if cfg.clip_threshold is not None:
            p_flat = clip_propensity(p_flat, cfg.clip_threshold)
    stack = TrainedStack(method, theta, propensity_grid=propensity_grid)
    for epoch in range(cfg.epochs):
        order = rngs["batches"].permutation(n_obs)
        total, n_steps = 0.0, 0
        for start in range(0, n_obs, cfg.batch_size):
            if method == "naive":
                idx = order[start : start + cfg.batch_size]
                u, i, r = train.users[idx], train.items[idx], train.ratings[idx]
                s = _guard_scores(sigmoid(theta.logits(u, i)), "prediction scores")
                loss = float(np.mean(error(kind, clamp_prob(s), r)))
                coef = error_dlogit(kind, s, r) / idx.size
            else:
                flat = rngs["domain"].integers(0, n_pairs, size=domain_batch)
                u, i = np.divmod(flat, n_items)
                o, r = o_flat[flat], r_flat[flat]
                s = _guard_scores(sigmoid(theta.logits(u, i)), "prediction scores")
                r_hat = clamp_prob(s)
                e = error(kind, r_hat, r)
                if method == "eib":
                    e_hat = heuristic_imputed_error(r_hat, cfg.eib_omega, cfg.eib_gamma)
                    loss = float(np.mean(o * e + (1 - o) * e_hat))
                    d_hat = cfg.eib_omega * np.sign(r_hat - cfg.eib_gamma) * s * (1 - s)
                    coef = (o * error_dlogit(kind, s, r) + (1 - o) * d_hat) / flat.size
                else:
                    w = o / p_flat[flat]
                    norm = flat.size if method == "ips" else w.sum()
                    if norm == 0:
                        continue
                    loss = float(np.sum(w * e) / norm)
                    coef = w * error_dlogit(kind, s, r) / norm
            _guard(loss, f"{method} loss")
            adam_step(theta.params(), opt, backward(theta, u, i, coef))
            total += loss
            n_steps += 1
        stack.history.append({"epoch": epoch, "pred_loss": total / max(n_steps, 1)})
        if callback is not None:
            callback(epoch, stack)
    return stack


def train_method(method: str, table: InteractionTable, split: Split, cfg: TrainConfig) -> TrainedStack:
    """Dispatch by method name; propensity-based methods pretrain their own ``h_psi``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method == "dce-dr":
        return trilevel_train(table, split, cfg)
    if method == "naive" or method == "eib":
        return train_simple(method, table, split, cfg)
    psi = train_propensity(table, split, cfg)
    if method == "dr-jl":
        return train_dr_jl(table, split, cfg, psi=psi)
    stack = train_simple(method, table, split, cfg, propensity_grid=psi.score_grid())
    stack.psi = psi
    return stack
