"""MSE, AUC and NDCG@K on an unbiased test set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def mse(predictions, labels) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError("need equal-length, non-empty inputs")
    return float(np.mean((predictions - labels) ** 2))


def _rankdata(x):
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [x.size]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def dcg(gains, k) -> float:
    gains = np.asarray(gains, dtype=np.float64)[:k]
    return float(np.sum(gains / np.log2(np.arange(2, gains.size + 2))))


def ndcg_user(ranked_gains, k):
    """NDCG@k of one ranked gain list, or ``None`` if it has no positive."""
    ranked_gains = np.asarray(ranked_gains, dtype=np.float64)
    ideal = dcg(np.sort(ranked_gains)[::-1], k)
    if ideal == 0.0:
        return None
    return dcg(ranked_gains, k) / ideal


def ndcg_at_k(ranked_lists, k) -> float:
    """Mean NDCG@k over users with at least one positive."""
    vals = [v for v in (ndcg_user(g, k) for g in ranked_lists) if v is not None]
    if not vals:
        raise ValueError("no user has a positive test item")
    return float(np.mean(vals))


def ranked_lists(users, scores, labels):
    """Per-user label lists sorted by descending score (stable on ties)."""
    users = np.asarray(users)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    order = np.lexsort((-scores, users))
    u_sorted = users[order]
    cuts = np.flatnonzero(np.diff(u_sorted)) + 1
    return [labels[idx] for idx in np.split(order, cuts)]


@dataclass
class MetricReport:
    mse: float
    auc: float
    ndcg: dict = field(default_factory=dict)
    auc_per_user: float | None = None

    def to_dict(self) -> dict:
        d = {"mse": self.mse, "auc": self.auc, "ndcg": {str(k): v for k, v in self.ndcg.items()}}
        if self.auc_per_user is not None:
            d["auc_per_user"] = self.auc_per_user
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_header(self):
        return ["mse", "auc"] + [f"ndcg@{k}" for k in self.ndcg]

    def csv_row(self):
        return [self.mse, self.auc] + [self.ndcg[k] for k in self.ndcg]


def per_user_auc(users, scores, labels) -> float:
    users = np.asarray(users)
    vals = []
    for u in np.unique(users):
        sel = users == u
        lab = np.asarray(labels)[sel]
        if 0 < lab.sum() < lab.size:
            vals.append(auc(np.asarray(scores)[sel], lab))
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(users, scores, labels, cutoffs=(5, 10), per_user=False) -> MetricReport:
    lists = ranked_lists(users, scores, labels)
    return MetricReport(
        mse=mse(scores, labels),
        auc=auc(scores, labels),
        ndcg={k: ndcg_at_k(lists, k) for k in cutoffs},
        auc_per_user=per_user_auc(users, scores, labels) if per_user else None,
    )
