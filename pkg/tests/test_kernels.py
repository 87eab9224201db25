import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from normlab import kernels
from normlab.kernels import available_backends, get_backend

BACKENDS = available_backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")


def test_python_backend_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS
    with pytest.raises(ValueError):
        get_backend("fortran")


@pytest.mark.parametrize("name", BACKENDS)
def test_layer_norm_forward_normalizes(name):
    k = get_backend(name)
    x = np.random.default_rng(0).normal(3.0, 2.0, (6, 16))
    y, xhat, rstd = k.layer_norm_forward(x, np.ones(16), np.zeros(16), 1e-5)
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(1.0 / rstd ** 2, x.var(axis=1) + 1e-5, rtol=1e-12)


@pytest.mark.parametrize("name", BACKENDS)
def test_adam_update_matches_formula(name):
    k = get_backend(name)
    rng = np.random.default_rng(1)
    p, g = rng.normal(size=7), rng.normal(size=7)
    m, v = rng.normal(size=7) * 0.1, rng.random(7) * 0.1
    p0, m0, v0 = p.copy(), m.copy(), v.copy()
    k.adam_update(p, g, m, v, 1e-3, 0.9, 0.98, 1e-8, 0.1, 0.02, 0.999)
    m_ref = 0.9 * m0 + 0.1 * g
    v_ref = 0.98 * v0 + 0.02 * g * g
    p_ref = p0 * 0.999 - 1e-3 * (m_ref / 0.1) / (np.sqrt(v_ref / 0.02) + 1e-8)
    np.testing.assert_allclose(m, m_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(v, v_ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(p, p_ref, rtol=0, atol=1e-15)


rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)),
              elements=st.floats(-20, 20, allow_nan=False))


@needs_both
@settings(max_examples=60, deadline=None)
@given(rows, st.data())
def test_backends_agree(x, data):
    py, cy = get_backend("python"), get_backend("cython")
    d = x.shape[1]
    gain = data.draw(arrays(np.float64, d, elements=st.floats(-2, 2, allow_nan=False)))
    bias = data.draw(arrays(np.float64, d, elements=st.floats(-2, 2, allow_nan=False)))
    dy = data.draw(arrays(np.float64, x.shape, elements=st.floats(-3, 3, allow_nan=False)))
    a, b = py.layer_norm_forward(x, gain, bias, 1e-5), cy.layer_norm_forward(x, gain, bias, 1e-5)
    for u, w in zip(a, b):
        np.testing.assert_allclose(u, w, rtol=1e-12, atol=1e-12)
    ga = py.layer_norm_backward(dy, a[1], a[2], gain)
    gb = cy.layer_norm_backward(dy, b[1], b[2], gain)
    for u, w in zip(ga, gb):
        np.testing.assert_allclose(u, w, rtol=1e-10, atol=1e-10)
    sa, sb = py.softmax_forward(x), cy.softmax_forward(x)
    np.testing.assert_allclose(sa, sb, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(py.softmax_backward(sa, dy), cy.softmax_backward(sb, dy), rtol=1e-10, atol=1e-12)


@needs_both
def test_backends_agree_on_adam():
    rng = np.random.default_rng(5)
    state = [rng.normal(size=20) for _ in range(3)]
    state[2] = np.abs(state[2])
    g = rng.normal(size=20)
    copies = [[s.copy() for s in state] for _ in range(2)]
    for name, (p, m, v) in zip(("python", "cython"), copies):
        get_backend(name).adam_update(p, g, m, v, 5e-4, 0.9, 0.98, 1e-8, 0.19, 0.0396, 0.9999)
    for u, w in zip(*copies):
        np.testing.assert_allclose(u, w, rtol=1e-14, atol=1e-15)
