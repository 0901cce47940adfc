import numpy as np
import pytest

from dcelab import kernels
from oracles import enumerate_dr

BACKENDS = [kernels.python] + ([kernels.compiled] if kernels.compiled is not None else [])
IDS = ["python"] + (["cython"] if kernels.compiled is not None else [])


def _mf(rng, n_users=7, n_items=5, dim=3, n=40):
    U = rng.normal(size=(n_users, dim))
    V = rng.normal(size=(n_items, dim))
    bu, bi = rng.normal(size=n_users), rng.normal(size=n_items)
    users = rng.integers(0, n_users, size=n).astype(np.int64)
    items = rng.integers(0, n_items, size=n).astype(np.int64)
    return users, items, U, V, bu, bi


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_logits_match_loop(impl, rng):
    users, items, U, V, bu, bi = _mf(rng)
    out = impl.mf_logits(users, items, U, V, bu, bi, 0.3)
    ref = [U[u] @ V[i] + bu[u] + bi[i] + 0.3 for u, i in zip(users, items)]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_scatter_grad_matches_loop(impl, rng):
    users, items, U, V, bu, bi = _mf(rng)
    coef = rng.normal(size=users.size)
    gU, gV, gbu, gbi = np.zeros_like(U), np.zeros_like(V), np.zeros_like(bu), np.zeros_like(bi)
    gb = impl.mf_scatter_grad(users, items, coef, U, V, gU, gV, gbu, gbi)
    rU, rV, rbu, rbi = np.zeros_like(U), np.zeros_like(V), np.zeros_like(bu), np.zeros_like(bi)
    for c, u, i in zip(coef, users, items):
        rU[u] += c * V[i]
        rV[i] += c * U[u]
        rbu[u] += c
        rbi[i] += c
    for got, want in [(gU, rU), (gV, rV), (gbu, rbu), (gbi, rbi)]:
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    assert gb == pytest.approx(coef.sum(), abs=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_enumeration_matches_pure_python_loop(impl, rng):
    for n in (1, 3, 6):
        e, eh = rng.random(n), rng.random(n)
        p, ph = rng.uniform(0.05, 1, n), rng.uniform(0.05, 1, n)
        m, v = impl.dr_enumerate(e, eh, p, ph)
        mo, vo = enumerate_dr(e, eh, p, ph)
        assert m == pytest.approx(mo, abs=1e-12)
        assert v == pytest.approx(vo, abs=1e-12)


@pytest.mark.parametrize("impl", BACKENDS, ids=IDS)
def test_enumeration_handles_certain_observation(impl):
    e = np.array([0.4, 0.9])
    m, v = impl.dr_enumerate(e, np.zeros(2), np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    assert m == pytest.approx(e.mean(), abs=1e-15)
    assert v == pytest.approx(0.0, abs=1e-15)


@pytest.mark.skipif(kernels.compiled is None, reason="compiled extension not built")
def test_compiled_and_fallback_agree(rng):
    users, items, U, V, bu, bi = _mf(rng, 50, 40, 8, 500)
    a = kernels.compiled.mf_logits(users, items, U, V, bu, bi, -0.2)
    b = kernels.python.mf_logits(users, items, U, V, bu, bi, -0.2)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    coef = rng.normal(size=users.size)
    outs = []
    for impl in (kernels.compiled, kernels.python):
        g = [np.zeros_like(U), np.zeros_like(V), np.zeros_like(bu), np.zeros_like(bi)]
        gb = impl.mf_scatter_grad(users, items, coef, U, V, *g)
        outs.append((g, gb))
    for x, y in zip(outs[0][0], outs[1][0]):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)
    assert outs[0][1] == pytest.approx(outs[1][1], abs=1e-12)
    e, eh, p, ph = rng.random(10), rng.random(10), rng.uniform(0.1, 1, 10), rng.uniform(0.1, 1, 10)
    np.testing.assert_allclose(kernels.compiled.dr_enumerate(e, eh, p, ph),
                               kernels.python.dr_enumerate(e, eh, p, ph), rtol=0, atol=1e-12)


def test_backend_selection_reports_compiled_when_available():
    assert kernels.BACKEND == ("cython" if kernels.compiled is not None else "python")
