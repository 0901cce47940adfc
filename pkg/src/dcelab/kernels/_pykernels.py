"""Pure numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Every function here has the same signature and semantics as its compiled
counterpart; tests run both and compare.
"""

import numpy as np


def mf_logits(users, items, U, V, bu, bi, g):
    return np.einsum("ij,ij->i", U[users], V[items]) + bu[users] + bi[items] + g


def mf_scatter_grad(users, items, coef, U, V, gU, gV, gbu, gbi):
    """Accumulate the MF parameter gradient for per-pair logit coefficients.

    ``gU``, ``gV``, ``gbu``, ``gbi`` are updated in place; the global-bias
    gradient is returned.
    """
    c = coef[:, None]
    np.add.at(gU, users, c * V[items])
    np.add.at(gV, items, c * U[users])
    np.add.at(gbu, users, coef)
    np.add.at(gbi, items, coef)
    return float(coef.sum())


def dr_enumerate(e, ehat, p, phat):
    """Exact mean and variance of the DR estimate over all 2^n masks."""
    n = e.shape[0]
    masks = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
    with np.errstate(divide="ignore"):
        # p == 1 or p == 0 give -inf log weights, which exp to 0 as intended
        logw = np.where(masks == 1, np.log(p)[None, :], np.log1p(-p)[None, :])
    w = np.exp(logw.sum(axis=1))
    vals = (ehat[None, :] + masks * ((e - ehat) / phat)[None, :]).sum(axis=1) / n
    mean = float(np.dot(w, vals))
    var = float(np.dot(w, (vals - mean) ** 2))
    return mean, var
