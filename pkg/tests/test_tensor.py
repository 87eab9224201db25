import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import normlab.tensor as T
from normlab.errors import ContractError, DimensionError
from normlab.tensor import ComputationTape, Tensor, backward, finite_diff, no_grad


def grad_of(f, *arrays):
    leaves = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    backward(f(*leaves))
    return [leaf.grad for leaf in leaves]


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# --- examples -------------------------------------------------------------


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[2.0, 3.0], [4.0, 5.0]]))
    np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])


def test_matmul_hand_value():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_fd():
    b = Tensor([[3.0], [4.0]])
    (ga,) = grad_of(lambda a: T.sum(T.matmul(a, b)), [[1.0, 2.0]])
    fd = finite_diff(lambda a: T.sum(T.matmul(a, b)), Tensor([[1.0, 2.0]]), h=1e-5)
    np.testing.assert_allclose(ga, [[3.0, 4.0]], atol=1e-12)
    np.testing.assert_allclose(fd, ga, atol=1e-9)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_softmax_meanvar_examples():
    assert T.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data, [1 / 3] * 3, atol=1e-15)
    m, v = T.mean_var(Tensor([1.0, 2.0, 3.0]), axis=0)
    assert m.item() == pytest.approx(2.0, abs=1e-15)
    assert v.item() == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_backward_examples():
    (g,) = grad_of(lambda x: T.sum(x), [0.5, -1.0, 2.0])
    assert g.tolist() == [1.0, 1.0, 1.0]
    (g,) = grad_of(lambda x: T.sum(x * x), [1.0, 2.0])
    assert g.tolist() == [2.0, 4.0]


def test_fanout_accumulates():
    (g,) = grad_of(lambda x: T.sum(x + x * 3.0), [1.0, 2.0])
    assert g.tolist() == [4.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_finite_diff_examples():
    fd = finite_diff(lambda x: T.sum(x), Tensor(np.linspace(-1, 1, 5)), h=1e-5)
    np.testing.assert_allclose(fd, np.ones(5), atol=1e-9)
    fd = finite_diff(lambda x: T.sum(x * x), Tensor([3.0]), h=1e-5)
    np.testing.assert_allclose(fd, [6.0], atol=1e-7)
    with pytest.raises(ContractError):
        finite_diff(lambda x: T.sum(x), Tensor([1.0]), h=0.0)


def test_embed_lookup_range_and_axis_errors():
    table = Tensor(np.ones((4, 2)))
    with pytest.raises(IndexError):
        T.embed_lookup(table, np.array([0, 4]))
    with pytest.raises(DimensionError):
        T.softmax(Tensor(np.ones((2, 2))), axis=2)
    with pytest.raises(DimensionError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(Tensor(rng.normal(size=(5, 7)) * 10), axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_retain_grad_on_intermediate():
    x = Tensor([1.0, -2.0], requires_grad=True)
    h = (x * 3.0).retain_grad()
    backward(T.sum(h * h))
    np.testing.assert_allclose(h.grad, 2 * h.data)
    np.testing.assert_allclose(x.grad, 6 * h.data)


def test_tape_is_topological():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    root = T.sum(T.relu(T.matmul(x, w)) * 0.5)
    tape = ComputationTape.from_root(root)
    position = {id(t): i for i, t in enumerate(tape.tensors)}
    for i, t in enumerate(tape.tensors):
        for inp in t.node.inputs:
            if id(inp) in position:
                assert position[id(inp)] < i
    assert len({id(t) for t in tape.tensors}) == len(tape)


# --- finite-difference oracle for every primitive ---------------------------

rng0 = np.random.default_rng(7)
W3 = rng0.uniform(-1, 1, (3, 4))
MASK = np.array([[False, True, False], [True, False, False]])

PRIMITIVES = {
    "matmul": ((2, 3), lambda x: T.matmul(x, Tensor(W3))),
    "matmul_batched": ((2, 2, 3), lambda x: T.matmul(x, T.transpose(x, (0, 2, 1)))),
    "add_bias": ((2, 3), lambda x: T.add(x, T.mean(x, axis=0))),
    "mul": ((2, 3), lambda x: T.mul(x, T.scale(x, 0.7))),
    "scale": ((2, 3), lambda x: T.scale(x, -1.3)),
    "relu": ((2, 3), lambda x: T.relu(x)),
    "softmax": ((2, 3), lambda x: T.softmax(x * 2.0, axis=-1)),
    "softmax_axis0": ((2, 3), lambda x: T.softmax(x, axis=0)),
    "mean": ((2, 3), lambda x: T.mean(x, axis=1)),
    "var": ((2, 3), lambda x: T.var(x, axis=1)),
    "sum_axis": ((2, 3), lambda x: T.sum(x, axis=0)),
    "transpose": ((2, 3), lambda x: T.transpose(x)),
    "reshape": ((2, 3), lambda x: T.reshape(x, (3, 2))),
    "embed": ((4, 3), lambda x: T.embed_lookup(x, np.array([[0, 3], [3, 1]]))),
    "masked_fill": ((2, 3), lambda x: T.masked_fill(x, MASK, -5.0)),
    "layer_norm": ((2, 3), lambda x: T.layer_norm(x, Tensor(np.array([1.0, 0.5, -2.0])),
                                                  Tensor(np.array([0.1, 0.0, 0.3])), 1e-5)),
    "cross_entropy": ((2, 3), lambda x: T.cross_entropy(x, np.array([2, 0]), smoothing=0.1)),
}


def _scalarize(name, y):
    # random projection so every output coordinate contributes
    if y.size == 1:
        return T.sum(y)
    r = np.random.default_rng(len(name)).uniform(-1, 1, y.shape)
    return T.sum(T.mul(y, Tensor(r)))


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    shape, fn = PRIMITIVES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(10):
        x0 = rng.uniform(-1, 1, shape)
        (g,) = grad_of(lambda x: _scalarize(name, fn(x)), x0)
        fd = finite_diff(lambda x: _scalarize(name, fn(x)), Tensor(x0), h=1e-5)
        assert rel_err(g, fd) < 1e-4, name


def test_layer_norm_gain_and_bias_grads():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (3, 4))
    r = rng.uniform(-1, 1, (3, 4))
    f = lambda x, gn, b: T.sum(T.mul(T.layer_norm(x, gn, b, 1e-5), Tensor(r)))  # noqa: E731
    gx, gg, gb = grad_of(f, x0, np.ones(4) * 1.5, np.zeros(4) + 0.2)
    fd_g = finite_diff(lambda gn: f(Tensor(x0), gn, Tensor(np.zeros(4) + 0.2)), Tensor(np.ones(4) * 1.5))
    fd_b = finite_diff(lambda b: f(Tensor(x0), Tensor(np.ones(4) * 1.5), b), Tensor(np.zeros(4) + 0.2))
    assert rel_err(gg, fd_g) < 1e-6
    assert rel_err(gb, fd_b) < 1e-6


def test_cross_entropy_ignore_index():
    logits = np.array([[1.0, 2.0, 0.5], [0.2, 0.1, 3.0]])
    full = T.cross_entropy(Tensor(logits[:1]), np.array([1])).item()
    masked = T.cross_entropy(Tensor(logits), np.array([1, 0]), ignore_index=0).item()
    assert masked == pytest.approx(full, abs=1e-15)


# --- properties -------------------------------------------------------------

finite = st.floats(-1, 1, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite))
def test_gradient_is_linear_in_the_objective(x0):
    f = lambda x: T.sum(T.softmax(x, axis=-1) * T.relu(x))  # noqa: E731
    g = lambda x: T.sum(T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5) * x)  # noqa: E731
    (gf,) = grad_of(f, x0)
    (gg,) = grad_of(g, x0)
    (gs,) = grad_of(lambda x: T.add(f(x), g(x)), x0)
    np.testing.assert_allclose(gs, gf + gg, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_replay_is_bit_identical(x0):
    w = Tensor(np.arange(8.0).reshape(4, 2) / 7)
    f = lambda x: T.cross_entropy(T.matmul(T.relu(x), w), np.array([0, 1, 1]), smoothing=0.1)  # noqa: E731
    (a,) = grad_of(f, x0)
    (b,) = grad_of(f, x0)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x0):
    y = T.softmax(Tensor(x0), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
