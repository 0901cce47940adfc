"""Calibration experts: Platt maps mixed per user by a Gumbel-Softmax assignment.

A bank holds ``K`` Platt maps ``c_k(p) = sigmoid(a_k * logit(p) + b_k)``
and a single affine assignment layer ``alpha_u = softmax(W E_u + c)`` on a
frozen user embedding ``E_u``. The calibrated score of a pair is
``sum_k beta_uk * c_k(p)`` with ``beta_u`` a relaxed one-hot sample of
``alpha_u`` during fitting, and the argmax one-hot at evaluation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import DataError
from .models import EPS_LOG, AdamState, FactorModel, adam_step, clamp_prob, logit, sigmoid

logger = logging.getLogger(__name__)

BANK_VERSION = 1


@dataclass
class PlattExpert:
    a: float = 1.0
    b: float = 0.0


def platt_apply(expert, p):
    """``sigmoid(a * logit(p) + b)``; ``expert`` is a PlattExpert or an ``(a, b)`` pair."""
    a, b = (expert.a, expert.b) if isinstance(expert, PlattExpert) else expert
    out = _platt_matrix(np.atleast_1d(a), np.atleast_1d(b), np.atleast_1d(p))[:, 0]
    return out if np.ndim(p) else float(out[0])


def _platt_matrix(a, b, raw):
    """Expert outputs, one column per expert; identity experts pass ``raw`` through exactly."""
    raw = clamp_prob(np.asarray(raw, dtype=np.float64))
    c = sigmoid(a[None, :] * logit(raw)[:, None] + b[None, :])
    ident = (a == 1.0) & (b == 0.0)
    if ident.any():
        c[:, ident] = raw[:, None]
    return c


def _mix(beta, c):
    """Row-wise ``sum_k beta_k c_k``, written as offsets from the first expert so equal
    expert outputs are returned exactly whatever the rounding in ``beta``."""
    return c[:, 0] + (beta[:, 1:] * (c[:, 1:] - c[:, :1])).sum(axis=1)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


@dataclass
class ExpertBank:
    """``K`` Platt experts and the assignment layer ``(W, offset)``."""

    a: np.ndarray
    b: np.ndarray
    weights: np.ndarray
    offset: np.ndarray
    role: str = "propensity"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(-1)
        k = self.a.size
        if k < 1:
            raise ValueError("a bank needs at least one expert")
        if self.b.size != k or self.weights.shape[0] != k or self.offset.size != k:
            raise ValueError("expert and assignment shapes disagree")
        if self.role not in ("propensity", "imputation"):
            raise ValueError(f"unknown bank role {self.role!r}")

    @classmethod
    def identity(cls, k, dim, rng=None, noise=0.01, role="propensity"):
        """Identity experts with small random assignment weights."""
        rng = np.random.default_rng(rng)
        return cls(np.ones(k), np.zeros(k), noise * rng.normal(size=(k, dim)), np.zeros(k), role)

    @property
    def k(self):
        return self.a.size

    @property
    def dim(self):
        return self.weights.shape[1]

    def experts(self):
        return [PlattExpert(float(a), float(b)) for a, b in zip(self.a, self.b)]

    def params(self) -> dict:
        return {"a": self.a, "b": self.b, "weights": self.weights, "offset": self.offset}

    def copy(self) -> "ExpertBank":
        return ExpertBank(self.a.copy(), self.b.copy(), self.weights.copy(), self.offset.copy(), self.role)


def assignment_logits(bank: ExpertBank, embedding):
    embedding = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    if embedding.shape[1] != bank.dim:
        raise ValueError(f"embedding has dimension {embedding.shape[1]}, bank expects {bank.dim}")
    return embedding @ bank.weights.T + bank.offset


def assignment_probs(bank: ExpertBank, embedding):
    """Assignment probabilities ``alpha``, one simplex row per embedding row."""
    return softmax(assignment_logits(bank, embedding))


def gumbel_noise(rng, shape):
    return np.random.default_rng(rng).gumbel(size=shape)


def gumbel_softmax(alpha, tau, rng=None, noise=None):
    """Relaxed categorical sample ``softmax((log alpha + g) / tau)``.

    ``noise`` overrides the Gumbel draw (pass zeros for the noise-free map).
    """
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("temperature must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    if noise is None:
        noise = gumbel_noise(rng, alpha.shape)
    with np.errstate(divide="ignore"):
        return softmax((np.log(alpha) + noise) / tau)


@dataclass
class TemperatureSchedule:
    """Exponential annealing from ``t0`` to ``tq`` over ``total_epochs``."""

    t0: float = 1.0
    tq: float = 1e-3
    total_epochs: int = 100

    def __post_init__(self):
        if not self.t0 > self.tq > 0:
            raise ValueError("need t0 > tq > 0")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def temperature(schedule: TemperatureSchedule, epoch) -> float:
    q, Q = epoch, schedule.total_epochs
    if not 0 <= q <= Q:
        raise ValueError(f"epoch {q} outside [0, {Q}]")
    if q == 0:
        return float(schedule.t0)
    if q == Q:
        return float(schedule.tq)
    return float(schedule.t0 * (schedule.tq / schedule.t0) ** (q / Q))


def _per_user_noise(users, k, rng):
    """One Gumbel draw per distinct user, shared by that user's pairs."""
    uniq, inv = np.unique(users, return_inverse=True)
    return gumbel_noise(rng, (uniq.size, k))[inv]


def _assignment(bank, embedding, users, tau, rng, noise, mode):
    z = assignment_logits(bank, embedding)
    if mode == "eval":
        beta = np.zeros_like(z)
        beta[np.arange(z.shape[0]), np.argmax(z, axis=1)] = 1.0
        return z, beta
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = _per_user_noise(np.asarray(users), bank.k, rng)
    # log(softmax(z)) differs from z by a per-row constant, which softmax ignores
    return z, softmax((z + noise) / tau)


def calibrated_score(bank: ExpertBank, embedding, raw_score, tau=1.0, rng=None,
                     users=None, noise=None, mode="sample"):
    """Mixture ``sum_k beta_k * c_k(raw_score)`` per pair.

    ``embedding`` has one row per pair. ``mode="eval"`` uses the argmax
    one-hot of ``alpha``; ``mode="sample"`` draws one Gumbel vector per
    distinct entry of ``users`` (defaults to one per pair).
    """
    raw = np.atleast_1d(np.asarray(raw_score, dtype=np.float64))
    if users is None:
        users = np.arange(raw.size)
    _, beta = _assignment(bank, embedding, users, tau, rng, noise, mode)
    c = _platt_matrix(bank.a, bank.b, raw)
    return _mix(beta, c)


@dataclass
class CalLoss:
    loss: float
    grads: dict
    n_coef_above_one: int = 0


def _bank_bce(bank, embedding, users, raw, coef, tau, rng, noise, mode="sample", weight=None):
    """Mean of ``w * (-t log m - (1 - t) log(1 - m))`` with its bank gradient."""
    n = raw.size
    w = 1.0 if weight is None else weight
    ell = logit(clamp_prob(raw))
    z, beta = _assignment(bank, embedding, users, tau, rng, noise, mode)
    c = _platt_matrix(bank.a, bank.b, raw)
    m_raw = _mix(beta, c)
    m = clamp_prob(m_raw)
    loss = float(np.mean(w * (-coef * np.log(m) - (1.0 - coef) * np.log1p(-m))))
    inside = (m_raw > EPS_LOG) & (m_raw < 1.0 - EPS_LOG)
    dm = np.where(inside, w * (-coef / m + (1.0 - coef) / (1.0 - m)) / n, 0.0)
    dc = dm[:, None] * beta * c * (1.0 - c)
    grads = {"a": (dc * ell[:, None]).sum(axis=0), "b": dc.sum(axis=0)}
    if mode == "eval":
        grads["weights"] = np.zeros_like(bank.weights)
        grads["offset"] = np.zeros_like(bank.offset)
    else:
        dz = dm[:, None] * beta * (c - m_raw[:, None]) / tau
        grads["weights"] = dz.T @ np.atleast_2d(embedding)
        grads["offset"] = dz.sum(axis=0)
    return loss, grads


def loss_propcal(bank, base: FactorModel, users, items, o, tau, rng=None, noise=None) -> CalLoss:
    """BCE of the calibrated propensity against ``o`` on a D_val batch.

    ``base`` is the frozen propensity model; it supplies both the raw score
    and the user embedding.
    """
    users = np.asarray(users, dtype=np.int64)
    raw = base.score(users, items)
    loss, grads = _bank_bce(bank, base.user_factors[users], users, raw,
                            np.asarray(o, dtype=np.float64), tau, rng, noise)
    return CalLoss(loss, grads)


IMPCAL_FORMS = ("label-weight", "clipped", "inverse-weight")


def loss_impcal(bank, base: FactorModel, users, items, r, p_bar, tau, rng=None, noise=None,
                form="label-weight") -> CalLoss:
    """Propensity-weighted BCE of the calibrated pseudo label on observed validation pairs.

    ``form`` picks how ``1 / p_bar`` enters:

    ``"label-weight"``
        label ``r / p_bar`` in ``-t log m - (1 - t) log(1 - m)``. The label
        exceeds 1 for positives with ``p_bar < 1``, which puts a negative
        weight on ``-log(1 - m)``.
    ``"clipped"``
        the same label clipped into ``[0, 1]``.
    ``"inverse-weight"``
        label ``r`` with per-pair weight ``1 / p_bar`` normalized to batch
        mean 1.
    """
    if form not in IMPCAL_FORMS:
        raise ValueError(f"unknown imputation calibration form {form!r}")
    users = np.asarray(users, dtype=np.int64)
    p_bar = np.asarray(p_bar, dtype=np.float64)
    if np.any(p_bar <= 0):
        raise ValueError("calibrated propensities must be positive")
    r = np.asarray(r, dtype=np.float64)
    coef = r / p_bar
    n_over = int(np.count_nonzero(coef > 1.0))
    weight = None
    if form == "clipped":
        coef = np.clip(coef, 0.0, 1.0)
    elif form == "inverse-weight":
        coef = r
        weight = 1.0 / p_bar
        weight = weight / weight.mean()
    raw = base.score(users, items)
    loss, grads = _bank_bce(bank, base.user_factors[users], users, raw, coef, tau, rng, noise,
                            weight=weight)
    return CalLoss(loss, grads, n_over)


def fit_experts(
    bank: ExpertBank,
    base: FactorModel,
    users,
    items,
    labels,
    loss: str = "prop",
    p_bar=None,
    schedule: TemperatureSchedule | None = None,
    epochs: int = 50,
    batch_size: int = 1024,
    lr: float = 0.01,
    weight_decay: float = 0.0,
    seed=0,
    form: str = "label-weight",
    history: list | None = None,
) -> ExpertBank:
    """Fit ``bank`` in place on a calibration set with ``base`` frozen.

    ``loss="prop"`` treats ``labels`` as observation indicators; ``"imp"``
    treats them as ratings and needs ``p_bar`` per pair. The temperature is
    annealed per epoch along ``schedule``.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.float64)
    if users.size == 0:
        raise DataError("empty calibration set")
    if loss == "imp" and p_bar is None:
        raise ValueError("imputation calibration needs p_bar")
    schedule = schedule or TemperatureSchedule(total_epochs=max(epochs - 1, 1))
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr, weight_decay=weight_decay)
    for epoch in range(epochs):
        tau = temperature(schedule, min(epoch, schedule.total_epochs))
        order = rng.permutation(users.size)
        total = 0.0
        for start in range(0, users.size, batch_size):
            idx = order[start : start + batch_size]
            if loss == "prop":
                res = loss_propcal(bank, base, users[idx], items[idx], labels[idx], tau, rng)
            else:
                res = loss_impcal(bank, base, users[idx], items[idx], labels[idx],
                                  np.asarray(p_bar)[idx], tau, rng, form=form)
            total += res.loss * idx.size
            adam_step(bank.params(), state, res.grads)
        if history is not None:
            history.append({"epoch": epoch, "tau": tau, "loss": total / users.size})
    return bank


def bank_scores(bank: ExpertBank, base: FactorModel, users, items):
    """Deterministic (argmax-assignment) calibrated scores for pairs."""
    users = np.asarray(users, dtype=np.int64)
    return calibrated_score(bank, base.user_factors[users], base.score(users, items), mode="eval")


def bank_score_grid(bank: ExpertBank, base: FactorModel):
    n_users, n_items = base.n_users, base.n_items
    uu, ii = np.divmod(np.arange(n_users * n_items), n_items)
    return bank_scores(bank, base, uu, ii).reshape(n_users, n_items)


def save_bank(bank: ExpertBank, path) -> None:
    np.savez(path, format_version=np.array(BANK_VERSION), role=np.array(bank.role), **bank.params())


def load_bank(path) -> ExpertBank:
    with np.load(path) as z:
        if int(z["format_version"]) != BANK_VERSION:
            raise ValueError("unsupported bank checkpoint version")
        return ExpertBank(z["a"], z["b"], z["weights"], z["offset"], role=str(z["role"]))


def ece_pairwise(p_true, p_hat) -> float:
    p_true, p_hat = np.asarray(p_true, dtype=np.float64), np.asarray(p_hat, dtype=np.float64)
    if p_true.shape != p_hat.shape:
        raise ValueError("shape mismatch")
    return float(np.mean(np.abs(p_true - p_hat)))


def mce_pairwise(p_true, p_hat) -> float:
    p_true, p_hat = np.asarray(p_true, dtype=np.float64), np.asarray(p_hat, dtype=np.float64)
    if p_true.shape != p_hat.shape:
        raise ValueError("shape mismatch")
    return float(np.max(np.abs(p_true - p_hat)))


def count_ties(scores) -> int:
    """Number of pairs sharing their score with another pair."""
    _, counts = np.unique(np.asarray(scores).ravel(), return_counts=True)
    return int(counts[counts > 1].sum())


@dataclass
class ReliabilityReport:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray
    ece: float
    mce: float
    meta: dict = field(default_factory=dict)

    @property
    def n_bins(self):
        return self.counts.size

    def to_dict(self) -> dict:
        return {
            "n_bins": int(self.n_bins),
            "ece": self.ece,
            "mce": self.mce,
            "meta": self.meta,
            "bins": [
                {
                    "lower": float(self.edges[m]),
                    "upper": float(self.edges[m + 1]),
                    "count": int(self.counts[m]),
                    "confidence": None if self.counts[m] == 0 else float(self.confidence[m]),
                    "accuracy": None if self.counts[m] == 0 else float(self.accuracy[m]),
                }
                for m in range(self.n_bins)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["bin", "lower", "upper", "count", "confidence", "accuracy"])
        for m in range(self.n_bins):
            empty = self.counts[m] == 0
            w.writerow([
                m, repr(float(self.edges[m])), repr(float(self.edges[m + 1])), int(self.counts[m]),
                "" if empty else repr(float(self.confidence[m])),
                "" if empty else repr(float(self.accuracy[m])),
            ])
        return buf.getvalue()


def bin_index(scores, n_bins):
    """Right-closed equal-width bins over [0, 1]; 0 falls in the first bin."""
    idx = np.ceil(np.asarray(scores, dtype=np.float64) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def ece_binned(scores, labels, n_bins: int = 15) -> ReliabilityReport:
    """Binned ECE/MCE of scores against binary labels (MCE over non-empty bins)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("no samples")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    idx = bin_index(scores, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    sum_conf = np.bincount(idx, weights=scores, minlength=n_bins)
    sum_acc = np.bincount(idx, weights=labels, minlength=n_bins)
    nz = counts > 0
    conf = np.divide(sum_conf, counts, out=np.zeros(n_bins), where=nz)
    acc = np.divide(sum_acc, counts, out=np.zeros(n_bins), where=nz)
    gap = np.abs(acc - conf)
    ece = float(np.sum(counts / scores.size * gap))
    mce = float(gap[nz].max())
    return ReliabilityReport(np.linspace(0.0, 1.0, n_bins + 1), counts, conf, acc, ece, mce)
