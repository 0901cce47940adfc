"""Sigmoid matrix-factorization scorers with analytic gradients and Adam.

One :class:`FactorModel` class serves the prediction, imputation and
propensity roles. Losses are expressed per pair as a coefficient on the
logit, and :func:`backward` scatters those coefficients into parameter
gradients through the compiled kernels.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .data import DataError, InteractionTable

logger = logging.getLogger(__name__)

EPS_LOG = 1e-7
CHECKPOINT_VERSION = 1
ROLES = ("prediction", "imputation", "propensity")


class ErrorKind(str, enum.Enum):
    BCE = "bce"
    MSE = "mse"


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def clamp_prob(p):
    return np.clip(p, EPS_LOG, 1.0 - EPS_LOG)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def error_pair(kind, r_hat):
    """Losses against hard labels 0 and 1: ``(e0, e1)``."""
    kind = ErrorKind(kind)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    _check_finite(r_hat)
    r_hat = clamp_prob(r_hat)
    if kind is ErrorKind.BCE:
        return -np.log1p(-r_hat), -np.log(r_hat)
    return r_hat**2, (1.0 - r_hat) ** 2


def error(kind, r_hat, target):
    """Loss of ``r_hat`` against a (possibly soft) label ``target``.

    A soft label ``t`` is read as a Bernoulli(t) label, so the loss is
    ``t * e1 + (1 - t) * e0``. For BCE this is the usual cross-entropy; for
    MSE it is the expected squared error, which exceeds ``(r_hat - t)**2``
    by ``t * (1 - t)``.
    """
    target = np.asarray(target, dtype=np.float64)
    _check_finite(target)
    e0, e1 = error_pair(kind, r_hat)
    return target * e1 + (1.0 - target) * e0


def error_dlogit(kind, score, target):
    """d error / d logit for a sigmoid score; zero where the score is clamped."""
    kind = ErrorKind(kind)
    inside = (score > EPS_LOG) & (score < 1.0 - EPS_LOG)
    if kind is ErrorKind.BCE:
        g = score - target
    else:
        g = 2.0 * (score - target) * score * (1.0 - score)
    return np.where(inside, g, 0.0)


def error_dtarget(kind, r_hat):
    e0, e1 = error_pair(kind, r_hat)
    return e1 - e0


@dataclass
class FactorModel:
    """``score(u, i) = sigmoid(<P_u, Q_i> + b_u + b_i + b)``."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray
    role: str = "prediction"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for name in ("user_factors", "item_factors", "user_bias", "item_bias", "global_bias"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.global_bias = self.global_bias.reshape(1)
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ValueError("user and item factors must share the embedding size")

    @classmethod
    def init(cls, n_users, n_items, dim, rng, scale=0.1, role="prediction"):
        rng = np.random.default_rng(rng)
        return cls(
            scale * rng.normal(size=(n_users, dim)),
            scale * rng.normal(size=(n_items, dim)),
            np.zeros(n_users),
            np.zeros(n_items),
            np.zeros(1),
            role,
        )

    @property
    def n_users(self):
        return self.user_factors.shape[0]

    @property
    def n_items(self):
        return self.item_factors.shape[0]

    @property
    def dim(self):
        return self.user_factors.shape[1]

    def params(self) -> dict:
        return {
            "user_factors": self.user_factors,
            "item_factors": self.item_factors,
            "user_bias": self.user_bias,
            "item_bias": self.item_bias,
            "global_bias": self.global_bias,
        }

    def copy(self) -> "FactorModel":
        return FactorModel(**{k: v.copy() for k, v in self.params().items()}, role=self.role)

    def logits(self, users, items):
        users = np.ascontiguousarray(users, dtype=np.int64)
        items = np.ascontiguousarray(items, dtype=np.int64)
        return kernels.mf_logits(
            users, items, self.user_factors, self.item_factors,
            self.user_bias, self.item_bias, float(self.global_bias[0]),
        )

    def score(self, users, items):
        """Clamped probabilities in ``[EPS_LOG, 1 - EPS_LOG]``."""
        return clamp_prob(sigmoid(self.logits(users, items)))

    def score_grid(self):
        z = (
            self.user_factors @ self.item_factors.T
            + self.user_bias[:, None]
            + self.item_bias[None, :]
            + self.global_bias[0]
        )
        return clamp_prob(sigmoid(z))


def predict(model: FactorModel, u, i):
    return model.score(np.atleast_1d(u), np.atleast_1d(i))


def zeros_like_params(model: FactorModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.params().items()}


def backward(model: FactorModel, users, items, coef) -> dict:
    """Gradient of ``sum_k coef_k * logit_k`` w.r.t. the model parameters."""
    grads = zeros_like_params(model)
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    grads["global_bias"][0] = kernels.mf_scatter_grad(
        users, items, coef, model.user_factors, model.item_factors,
        grads["user_factors"], grads["item_factors"], grads["user_bias"], grads["item_bias"],
    )
    return grads


def gradient(model: FactorModel, users, items, targets, weights, kind=ErrorKind.BCE) -> dict:
    """Exact gradient of ``sum_k w_k * e(score_k, target_k)``."""
    weights = np.asarray(weights, dtype=np.float64)
    _check_finite(weights)
    score = sigmoid(model.logits(users, items))
    coef = weights * error_dlogit(kind, score, np.asarray(targets, dtype=np.float64))
    return backward(model, users, items, coef)


def weighted_loss(model: FactorModel, users, items, targets, weights, kind=ErrorKind.BCE) -> float:
    return float(np.sum(np.asarray(weights) * error(kind, model.score(users, items), targets)))


@dataclass
class AdamState:
    """Adam moments with decoupled weight decay."""

    lr: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, grads: dict) -> dict:
    """Apply one Adam update to ``params`` in place and return them.

    ``params`` is a name -> array mapping, e.g. ``FactorModel.params()``.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def save_model(model: FactorModel, path) -> None:
    np.savez(
        path,
        format_version=np.array(CHECKPOINT_VERSION),
        role=np.array(model.role),
        **model.params(),
    )


def load_model(path) -> FactorModel:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return FactorModel(
            z["user_factors"], z["item_factors"], z["user_bias"], z["item_bias"],
            z["global_bias"], role=str(z["role"]),
        )


def train_propensity_classifier(
    table: InteractionTable,
    negatives_per_positive: float = 4.0,
    epochs: int = 20,
    dim: int = 16,
    lr: float = 0.01,
    weight_decay: float = 0.0,
    batch_size: int = 512,
    seed=0,
    exclude_mask=None,
    full_complement: bool = False,
    history: list | None = None,
) -> FactorModel:
    """Fit ``h_psi`` by BCE on observed (o=1) versus unobserved (o=0) pairs.

    Negatives come from pairs that are neither in ``table`` nor in
    ``exclude_mask``; they are redrawn uniformly each epoch at
    ``negatives_per_positive`` unless ``full_complement`` is set.
    """
    if table.n_observed == 0:
        raise DataError("propensity classifier needs at least one observed pair")
    rng = np.random.default_rng(seed)
    model = FactorModel.init(table.n_users, table.n_items, dim, rng, role="propensity")
    state = AdamState(lr=lr, weight_decay=weight_decay)
    observed = table.mask()
    if exclude_mask is not None:
        observed = observed | exclude_mask
    pool = np.flatnonzero(~observed.ravel())
    pos = table.flat_index
    n_neg = 0 if pool.size == 0 else (pool.size if full_complement else int(round(negatives_per_positive * pos.size)))
    for epoch in range(epochs):
        if n_neg == 0:
            neg = pool[:0]
        elif full_complement:
            neg = pool
        else:
            neg = pool[rng.integers(0, pool.size, size=n_neg)]
        flat = np.concatenate([pos, neg])
        label = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
        order = rng.permutation(flat.size)
        total = 0.0
        for start in range(0, flat.size, batch_size):
            idx = order[start : start + batch_size]
            u, i = np.divmod(flat[idx], table.n_items)
            w = np.full(idx.size, 1.0 / idx.size)
            grads = gradient(model, u, i, label[idx], w)
            total += weighted_loss(model, u, i, label[idx], np.ones(idx.size))
            adam_step(model.params(), state, grads)
        if history is not None:
            history.append(total / flat.size)
        logger.debug("propensity epoch %d bce %.5f", epoch, total / flat.size)
    return model


def heuristic_propensity(table: InteractionTable, exponent: float = 0.5) -> np.ndarray:
    """Item-popularity propensity ``(count_i / max_i count_i) ** exponent`` on the full grid.

    Items never observed would score 0; they are floored at ``EPS_LOG``.
    """
    if table.n_observed == 0:
        raise DataError("heuristic propensity needs at least one observation")
    counts = np.bincount(table.items, minlength=table.n_items).astype(np.float64)
    ratio = counts / counts.max()
    p_item = np.maximum(ratio**exponent, EPS_LOG)
    return np.broadcast_to(p_item, (table.n_users, table.n_items)).copy()


def heuristic_imputed_error(r_hat, omega, gamma):
    if omega < 0:
        raise ValueError("omega must be non-negative")
    return omega * np.abs(np.asarray(r_hat, dtype=np.float64) - gamma)
