"""Interaction tables, synthetic MNAR data with known ground truth, splits, ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed, inconsistent or unusable interaction data."""


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class InteractionTable:
    """Observed binary ratings on an ``n_users x n_items`` grid.

    The full domain is the implicit grid; ``users``, ``items`` and
    ``ratings`` list the observed pairs.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        ratings = np.ascontiguousarray(self.ratings, dtype=np.float64)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)
        if self.n_users <= 0 or self.n_items <= 0:
            raise DataError("grid must have at least one user and one item")
        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise DataError("users, items and ratings must be equal-length vectors")
        if users.size:
            if users.min() < 0 or users.max() >= self.n_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise DataError("item index out of range")
        if not np.all((ratings == 0.0) | (ratings == 1.0)):
            raise DataError("ratings must be exactly 0 or 1")
        flat = users * self.n_items + items
        if np.unique(flat).size != flat.size:
            raise DataError("duplicate (user, item) pair in observed set")

    @property
    def n_observed(self) -> int:
        return int(self.users.size)

    @property
    def n_pairs(self) -> int:
        return self.n_users * self.n_items

    @property
    def flat_index(self) -> np.ndarray:
        return self.users * self.n_items + self.items

    def mask(self) -> np.ndarray:
        m = np.zeros((self.n_users, self.n_items), dtype=bool)
        m[self.users, self.items] = True
        return m

    def rating_grid(self, fill=np.nan) -> np.ndarray:
        g = np.full((self.n_users, self.n_items), fill, dtype=np.float64)
        g[self.users, self.items] = self.ratings
        return g

    def subset(self, idx) -> "InteractionTable":
        return InteractionTable(
            self.n_users, self.n_items, self.users[idx], self.items[idx], self.ratings[idx]
        )


@dataclass(frozen=True)
class GroundTruth:
    """True observation propensities ``p`` and relevance probabilities ``q``."""

    p: np.ndarray
    q: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if p.ndim != 2 or p.shape != q.shape:
            raise DataError(f"p and q must be matching grids, got {p.shape} and {q.shape}")
        if np.any(p < 0) or np.any(p > 1) or np.any(q < 0) or np.any(q > 1):
            raise DataError("p and q must lie in [0, 1]")

    @property
    def shape(self):
        return self.p.shape

    def check_table(self, table: InteractionTable) -> None:
        if self.shape != (table.n_users, table.n_items):
            raise DataError("ground truth shape does not match the interaction table")

    def save(self, path) -> None:
        """Write as ``.npz`` (binary) or ``.csv`` (one row per pair)."""
        path = Path(path)
        if path.suffix == ".csv":
            n_users, n_items = self.shape
            uu, ii = np.divmod(np.arange(n_users * n_items), n_items)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["user", "item", "p", "q"])
                for u, i, pv, qv in zip(uu, ii, self.p.ravel(), self.q.ravel()):
                    w.writerow([u, i, repr(float(pv)), repr(float(qv))])
        else:
            np.savez(path, p=self.p, q=self.q, seed=-1 if self.seed is None else self.seed)

    @classmethod
    def load(cls, path) -> "GroundTruth":
        path = Path(path)
        if path.suffix == ".csv":
            with path.open() as fh:
                rows = list(csv.DictReader(fh))
            u = np.array([int(r["user"]) for r in rows])
            i = np.array([int(r["item"]) for r in rows])
            p = np.zeros((u.max() + 1, i.max() + 1))
            q = np.zeros_like(p)
            p[u, i] = [float(r["p"]) for r in rows]
            q[u, i] = [float(r["q"]) for r in rows]
            return cls(p, q)
        with np.load(path) as z:
            seed = int(z["seed"])
            return cls(z["p"], z["q"], None if seed < 0 else seed)


@dataclass
class SynthConfig:
    """Knobs of the synthetic MNAR generator.

    Relevance is ``q = sigmoid(relevance_scale * <x_u, y_i> / sqrt(d) + b_i)``
    and exposure is
    ``p = floor + (1 - floor) * sigmoid(preference_strength * (q - 0.5)
    + popularity_skew * z_i + exposure_offset)`` so preferred and popular
    items are observed more often.
    """

    n_users: int = 200
    n_items: int = 150
    latent_dim: int = 4
    popularity_skew: float = 1.0
    propensity_floor: float = 0.02
    seed: int = 0
    preference_strength: float = 4.0
    exposure_offset: float = -3.0
    relevance_scale: float = 2.5
    item_quality_scale: float = 0.5

    def validate(self):
        if self.n_users <= 0 or self.n_items <= 0:
            raise DataError("synthetic grid must be non-empty")
        if self.latent_dim <= 0:
            raise DataError("latent_dim must be positive")
        if not 0.0 < self.propensity_floor <= 1.0:
            raise DataError("propensity_floor must lie in (0, 1]")


def generate_synthetic(config: SynthConfig) -> tuple[InteractionTable, GroundTruth]:
    """Draw ground truth ``(p, q)`` and one MNAR observation of it."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.latent_dim
    x_u = rng.normal(size=(config.n_users, d))
    y_i = rng.normal(size=(config.n_items, d))
    quality = config.item_quality_scale * rng.normal(size=config.n_items)
    popularity = rng.normal(size=config.n_items)
    q = _sigmoid(config.relevance_scale * (x_u @ y_i.T) / np.sqrt(d) + quality[None, :])
    floor = config.propensity_floor
    expo = (
        config.preference_strength * (q - 0.5)
        + config.popularity_skew * popularity[None, :]
        + config.exposure_offset
    )
    p = floor + (1.0 - floor) * _sigmoid(expo)
    if floor == 1.0:
        p = np.ones_like(q)
    gt = GroundTruth(p=p, q=q, seed=config.seed)
    obs = rng.random(p.shape) < p
    r = (rng.random(q.shape) < q).astype(np.float64)
    users, items = np.nonzero(obs)
    table = InteractionTable(config.n_users, config.n_items, users, items, r[users, items])
    return table, gt


def sample_observations(gt: GroundTruth, rng_seed) -> np.ndarray:
    """Independent ``o ~ Bernoulli(p)`` draw over the whole grid."""
    rng = np.random.default_rng(rng_seed)
    return rng.random(gt.shape) < gt.p


def sample_table(gt: GroundTruth, rng_seed) -> InteractionTable:
    """Fresh MNAR table: observe by ``p``, rate by ``q``."""
    rng = np.random.default_rng(rng_seed)
    obs = rng.random(gt.shape) < gt.p
    users, items = np.nonzero(obs)
    r = (rng.random(users.size) < gt.q[users, items]).astype(np.float64)
    return InteractionTable(gt.shape[0], gt.shape[1], users, items, r)


def unbiased_test_set(gt: GroundTruth, items_per_user: int, seed) -> InteractionTable:
    """Missing-at-random test ratings: uniform items per user, ``r ~ Bernoulli(q)``."""
    n_users, n_items = gt.shape
    k = min(items_per_user, n_items)
    rng = np.random.default_rng(seed)
    items = np.concatenate([rng.choice(n_items, size=k, replace=False) for _ in range(n_users)])
    users = np.repeat(np.arange(n_users), k)
    r = (rng.random(users.size) < gt.q[users, items]).astype(np.float64)
    return InteractionTable(n_users, n_items, users, items, r)


@dataclass(frozen=True)
class Split:
    """Train/validation partition of the observed pairs plus the labelled set D_val.

    ``dval_*`` holds the propensity calibration set: validation pairs with
    ``o = 1`` and never-observed pairs with ``o = 0``.
    """

    train: InteractionTable
    val: InteractionTable
    dval_users: np.ndarray
    dval_items: np.ndarray
    dval_o: np.ndarray
    negative_rate: float = 1.0

    @property
    def n_dval(self) -> int:
        return int(self.dval_users.size)


def split_validation(table: InteractionTable, fraction: float, seed, negative_rate: float = 1.0) -> Split:
    """Hold out ``round(fraction * |O|)`` observed pairs as the validation set.

    ``negative_rate`` keeps that fraction of never-observed pairs as D_val
    negatives (1.0 keeps all of them).
    """
    if not 0.0 < fraction < 1.0:
        raise DataError("validation fraction must lie in (0, 1)")
    if not 0.0 < negative_rate <= 1.0:
        raise DataError("negative_rate must lie in (0, 1]")
    n = table.n_observed
    n_val = int(round(fraction * n))
    if n_val == 0:
        raise DataError(f"fraction {fraction} of {n} observed pairs leaves an empty validation set")
    if n_val == n:
        raise DataError(f"fraction {fraction} of {n} observed pairs leaves an empty training set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    never = np.flatnonzero(~table.mask().ravel())
    if negative_rate < 1.0:
        keep = rng.random(never.size) < negative_rate
        never = never[keep]
    neg_u, neg_i = np.divmod(never, table.n_items)
    val = table.subset(val_idx)
    dval_users = np.concatenate([val.users, neg_u]).astype(np.int64)
    dval_items = np.concatenate([val.items, neg_i]).astype(np.int64)
    dval_o = np.concatenate([np.ones(n_val), np.zeros(never.size)])
    return Split(table.subset(train_idx), val, dval_users, dval_items, dval_o, negative_rate)


@dataclass
class IdMap:
    users: dict = field(default_factory=dict)
    items: dict = field(default_factory=dict)


def load_tsv(path, rating_threshold: float = 3.0, ids: IdMap | None = None) -> tuple[InteractionTable, IdMap]:
    """Read ``user item rating`` rows; ``r = 1`` iff rating > threshold.

    Ids are arbitrary integers, re-indexed densely in order of first
    appearance. Passing the ``ids`` of an earlier file (a test split, say)
    reuses its indexing; ids it has not seen are rejected.
    """
    frozen = ids is not None
    ids = IdMap() if ids is None else ids
    users, items, ratings = [], [], []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                uid, iid, raw = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if (uid, iid) in seen:
                raise DataError(f"{path}:{lineno}: duplicate pair ({uid}, {iid})")
            seen.add((uid, iid))
            if frozen and (uid not in ids.users or iid not in ids.items):
                raise DataError(f"{path}:{lineno}: id pair ({uid}, {iid}) not in the reference index")
            users.append(ids.users.setdefault(uid, len(ids.users)))
            items.append(ids.items.setdefault(iid, len(ids.items)))
            ratings.append(1.0 if raw > rating_threshold else 0.0)
    if not users:
        raise DataError(f"{path}: no interactions")
    table = InteractionTable(len(ids.users), len(ids.items), users, items, ratings)
    return table, ids


def load_dense_matrix(path, rating_threshold: float = 3.0) -> InteractionTable:
    """Read a whitespace matrix of raw ratings (0 = missing), as in Coat's ``.ascii`` files."""
    try:
        grid = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    users, items = np.nonzero(grid)
    r = (grid[users, items] > rating_threshold).astype(np.float64)
    return InteractionTable(grid.shape[0], grid.shape[1], users, items, r)


def load_ratings(path, rating_threshold: float = 3.0, layout: str = "auto", ids: IdMap | None = None):
    """Read ``layout="triplets"`` rows or a ``layout="dense"`` matrix.

    ``"auto"`` treats ``.ascii`` files as dense, then any file whose first
    row has three fields as triplets. A three-column dense matrix without
    the ``.ascii`` suffix needs ``layout="dense"``. Returns the table and the
    id map (``None`` for dense files, whose row and column numbers are the ids).
    """
    if layout == "auto":
        if Path(path).suffix == ".ascii":
            layout = "dense"
        else:
            with open(path) as fh:
                first = next((ln for ln in fh if ln.strip() and not ln.startswith("#")), "")
            layout = "triplets" if len(first.split()) == 3 else "dense"
    if layout == "triplets":
        return load_tsv(path, rating_threshold, ids)
    if layout == "dense":
        return load_dense_matrix(path, rating_threshold), None
    raise ValueError(f"unknown layout {layout!r}")


def save_tsv(table: InteractionTable, path) -> None:
    with open(path, "w") as fh:
        for u, i, r in zip(table.users, table.items, table.ratings):
            fh.write(f"{u}\t{i}\t{int(r)}\n")


def save_table(table: InteractionTable, path) -> None:
    """Lossless ``.npz`` form that keeps the grid shape (TSV drops empty rows/columns)."""
    np.savez(
        path,
        shape=np.array([table.n_users, table.n_items]),
        users=table.users,
        items=table.items,
        ratings=table.ratings,
    )


def load_table(path) -> InteractionTable:
    with np.load(path) as z:
        n_users, n_items = (int(v) for v in z["shape"])
        return InteractionTable(n_users, n_items, z["users"], z["items"], z["ratings"])
