import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import normlab.tensor as T
from normlab.errors import ConfigError, ContractError
from normlab.layers import LayerNormParams, init_feed_forward, feed_forward, layer_norm
from normlab.strategies import (KINDS, SCHEDULES, NormStrategy, Schedule, branchnorm_alpha, deepnorm_coeffs,
                                sublayer_apply)
from normlab.tensor import Tensor, backward, finite_diff


def decimal_coeffs(N, M, digits=40):
    """Independent 40-digit evaluation of the DeepNorm closed forms."""
    getcontext().prec = digits
    base = Decimal(N) ** 4 * Decimal(M)
    sixteenth, quarter = Decimal(1) / 16, Decimal(1) / 4
    return (Decimal("0.81") * base ** sixteenth, Decimal("0.87") / base ** sixteenth,
            (3 * Decimal(M)) ** quarter, 1 / (12 * Decimal(M)) ** quarter)


@pytest.mark.parametrize("N,M", [(1, 1), (6, 6), (18, 18), (100, 100), (3, 9), (200, 7)])
def test_coeffs_match_high_precision(N, M):
    for got, ref in zip(deepnorm_coeffs(N, M), decimal_coeffs(N, M)):
        assert got == pytest.approx(float(ref), rel=1e-14, abs=0)


def test_coeffs_unit_depth():
    ae, be, ad, bd = deepnorm_coeffs(1, 1)
    assert (ae, be) == (0.81, 0.87)
    assert ad == pytest.approx(3 ** 0.25, abs=1e-15)
    assert bd == pytest.approx(12 ** -0.25, abs=1e-15)


@pytest.mark.parametrize("N,M", [(0, 1), (1, 0), (-2, 3), (1.5, 2)])
def test_coeffs_reject_bad_depth(N, M):
    with pytest.raises(ContractError):
        deepnorm_coeffs(N, M)


@settings(max_examples=60)
@given(st.integers(1, 1000), st.integers(1, 1000))
def test_encoder_product_is_constant(N, M):
    ae, be, _, _ = deepnorm_coeffs(N, M)
    assert abs(ae * be - 0.81 * 0.87) <= 1e-12


# --- schedules -----------------------------------------------------------


def test_linear_examples():
    assert branchnorm_alpha(0, 4000) == 0.0
    assert branchnorm_alpha(2000, 4000) == 0.5
    for kind in SCHEDULES:
        assert branchnorm_alpha(40000, 4000, kind) == 1.0
        assert branchnorm_alpha(0, 17, kind) == 0.0


@settings(max_examples=200)
@given(st.sampled_from(SCHEDULES), st.integers(1, 50000), st.integers(0, 100000), st.integers(0, 100000))
def test_schedules_monotone_and_clipped(kind, T, t1, t2):
    lo, hi = sorted((t1, t2))
    a_lo, a_hi = branchnorm_alpha(lo, T, kind), branchnorm_alpha(hi, T, kind)
    assert 0.0 <= a_lo <= a_hi <= 1.0
    if lo >= T:
        assert a_lo == 1.0


@pytest.mark.parametrize("kind", SCHEDULES)
def test_schedule_shapes(kind):
    # exp lags linear, sigmoid is symmetric around T/2
    mid = branchnorm_alpha(2000, 4000, kind)
    if kind == "exp":
        assert mid < 0.5
    else:
        assert mid == pytest.approx(0.5, abs=1e-12)
    if kind == "sigmoid":
        assert branchnorm_alpha(1000, 4000, kind) + branchnorm_alpha(3000, 4000, kind) == pytest.approx(1.0)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        Schedule("cosine")
    with pytest.raises(ConfigError):
        Schedule("linear", T=0)
    with pytest.raises(ContractError):
        branchnorm_alpha(-1, 10)
    assert Schedule("linear", 10)(5) == 0.5


# --- strategies ----------------------------------------------------------


def test_named_and_validation():
    st_ = NormStrategy.named("deepnorm", 6, 6)
    assert (st_.alpha_encoder, st_.beta_encoder) == deepnorm_coeffs(6, 6)[:2]
    assert NormStrategy.named("branchnorm", 2, 2).beta_init is True
    assert NormStrategy.named("branchnorm", 2, 2, beta_init=False).init_gain("encoder") == 1.0
    assert NormStrategy.post_ln().init_gain("decoder") == 1.0
    with pytest.raises(ConfigError):
        NormStrategy.named("rezero", 1, 1)
    with pytest.raises(ConfigError):
        NormStrategy("deepnorm", alpha_encoder=0.0)


def _branch(seed=0, d=6):
    rng = np.random.default_rng(seed)
    p = init_feed_forward(d, 2 * d, rng)
    return p, (lambda x: feed_forward(x, p))


def _apply(strategy, x, t, side="encoder", seed=0):
    p, f = _branch(seed, x.shape[-1])
    ln = LayerNormParams.create(x.shape[-1])
    return sublayer_apply(strategy, side, x, f, t, ln), p


def test_rules_by_hand():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(3, 6))
    p, f = _branch()
    ln = LayerNormParams.create(6)
    fx = f(Tensor(x0)).data
    ref = lambda z: layer_norm(Tensor(z), ln).data  # noqa: E731
    dn = NormStrategy.deep_norm(4, 4)
    bn = NormStrategy.branch_norm(4, 4, T=10)
    np.testing.assert_allclose(sublayer_apply(NormStrategy.post_ln(), "encoder", Tensor(x0), f, 0, ln).data,
                               ref(x0 + fx), atol=1e-14)
    np.testing.assert_allclose(sublayer_apply(NormStrategy.pre_ln(), "encoder", Tensor(x0), f, 0, ln).data,
                               x0 + f(Tensor(ref(x0))).data, atol=1e-14)
    np.testing.assert_allclose(sublayer_apply(dn, "decoder", Tensor(x0), f, 0, ln).data,
                               ref(dn.alpha_decoder * x0 + fx), atol=1e-14)
    np.testing.assert_allclose(sublayer_apply(bn, "encoder", Tensor(x0), f, 3, ln).data,
                               ref(x0 + 0.3 * fx), atol=1e-14)
    with pytest.raises(ConfigError):
        sublayer_apply(NormStrategy.post_ln(), "middle", Tensor(x0), f, 0, ln)


def test_branchnorm_zero_step_is_pure_layer_norm():
    x0 = np.random.default_rng(2).normal(size=(3, 6))
    out, p = _apply(NormStrategy.branch_norm(2, 2), Tensor(x0), 0)
    np.testing.assert_array_equal(out.data, layer_norm(Tensor(x0), LayerNormParams.create(6)).data)
    backward(T.sum(out * out))
    for w in p.tensors().values():
        assert np.abs(w.grad).max() <= 1e-12


@pytest.mark.parametrize("t", [4000, 4001, 10 ** 6])
def test_branchnorm_after_T_equals_postln(t):
    x0 = np.random.default_rng(3).normal(size=(3, 6))
    a, _ = _apply(NormStrategy.branch_norm(2, 2), Tensor(x0), t)
    b, _ = _apply(NormStrategy.post_ln(), Tensor(x0), t)
    c, _ = _apply(NormStrategy.deep_norm(2, 2).with_alpha(1.0), Tensor(x0), t)
    assert np.abs(a.data - b.data).max() <= 1e-12
    assert np.abs(c.data - b.data).max() <= 1e-12


@pytest.mark.parametrize("strategy", [NormStrategy.post_ln(), NormStrategy.pre_ln(), NormStrategy.deep_norm(3, 3),
                                      NormStrategy.branch_norm(3, 3, T=10)], ids=KINDS)
def test_rules_pass_finite_difference_oracle(strategy):
    rng = np.random.default_rng(4)
    r = Tensor(rng.uniform(-1, 1, (3, 6)))
    for _ in range(5):
        x0 = rng.uniform(-1, 1, (3, 6))
        objective = lambda x: T.sum(T.mul(_apply(strategy, x, 4, "decoder")[0], r))  # noqa: E731
        x = Tensor(x0, requires_grad=True)
        backward(objective(x))
        fd = finite_diff(objective, Tensor(x0))
        assert np.linalg.norm(x.grad - fd) / np.linalg.norm(fd) < 1e-4
