"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers the
operation that produced it. :func:`backward` traces the graph reachable from a
scalar root into a :class:`ComputationTape` (creation order is a topological
order) and walks it once in reverse.

Broadcasting is deliberately limited: ``add`` accepts a right operand whose
shape equals the trailing dimensions of the left operand (bias addition) and
``matmul`` accepts a 2-D right operand against a batched left operand.
Everything else must match exactly.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording nodes (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]
    seq: int


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "retain", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.retain = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate tensor after ``backward``."""
        self.retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward, next(_seq))
    return out


# --------------------------------------------------------------------------
# tape and reverse pass


class ComputationTape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)


def backward(root: Tensor) -> ComputationTape:
    """Populate ``.grad`` on every reachable leaf that requires it.

    Gradients add into any existing ``.grad`` (call ``zero_grad`` between
    steps). Intermediate tensors keep their gradient only if
    :meth:`Tensor.retain_grad` was called before the forward pass finished.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    tape = ComputationTape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    if root.node is None:
        leaves[id(root)] = root

    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.retain:
            t.grad = g if t.grad is None else t.grad + g
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if inp.node is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None or not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return tape


def finite_diff(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite_diff step h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty(flat.size)

    def evaluate(arr):
        with no_grad():
            val = f(Tensor(arr))
        return val.item() if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base.copy())
        flat[i] = orig - h
        fm = evaluate(base.copy())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        g = np.ascontiguousarray(g)
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise DimensionError(f"add shapes {a.shape} and {b.shape} are incompatible")
    lead = tuple(range(a.ndim - b.ndim))

    def back(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result(a.data + b.data, "add", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # np.maximum keeps NaN, so a non-finite value is never masked to zero
    pos = a.data > 0
    return _result(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of bounds for shape {a.shape}")
    return axis % a.ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    moved = np.moveaxis(a.data, axis, -1)
    shp = moved.shape
    y = kernels.softmax_forward(np.ascontiguousarray(moved.reshape(-1, shp[-1])))

    def back(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, shp[-1]))
        dx = kernels.softmax_backward(y, gm)
        return (np.moveaxis(dx.reshape(shp), -1, axis),)

    return _result(np.moveaxis(y.reshape(shp), -1, axis), "softmax", (a,), back)


def mean(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis(a, axis)
    n = a.shape[axis]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _result(a.data.mean(axis=axis), "mean", (a,), back)


def var(a: Tensor, axis: int) -> Tensor:
    """Population variance along ``axis``."""
    axis = _check_axis(a, axis)
    n = a.shape[axis]
    centered = a.data - a.data.mean(axis=axis, keepdims=True)

    def back(g):
        return (np.expand_dims(g, axis) * (2.0 / n) * centered,)

    return _result((centered * centered).mean(axis=axis), "var", (a,), back)


def mean_var(a: Tensor, axis: int) -> tuple[Tensor, Tensor]:
    return mean(a, axis), var(a, axis)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _result(np.asarray(a.data.sum()), "sum", (a,),
                       lambda g: (np.full(a.shape, np.asarray(g).item()),))
    axis = _check_axis(a, axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(a.data.sum(axis=axis), "sum", (a,), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)) or len(axes) != a.ndim:
        raise DimensionError(f"bad transpose axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], "embed", (table,), back)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with ``value`` (mask broadcasts)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _result(np.where(mask, value, a.data), "masked_fill", (a,), lambda g: (g * keep,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Fused LayerNorm over the last axis with affine gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} does not match gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_forward(rows, gain.data, bias.data, float(eps))

    def back(g):
        dx, dgain, dbias = kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data)
        return dx.reshape(x.shape), dgain, dbias

    return _result(y.reshape(x.shape), "layer_norm", (x, gain, bias), back)


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0, ignore_index: int | None = None) -> Tensor:
    """Label-smoothed cross entropy averaged over non-ignored rows.

    ``logits`` is ``(..., V)`` and ``targets`` the matching integer ids. The
    target distribution is ``(1 - smoothing) * onehot + smoothing / V``.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError("smoothing must lie in [0, 1)")
    flat_t = targets.reshape(-1)
    if flat_t.size and (flat_t.min() < 0 or flat_t.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    z = logits.data.reshape(-1, V)
    keep = np.ones(flat_t.size, dtype=bool) if ignore_index is None else flat_t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy has no non-ignored targets")

    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat_t.size)
    nll = -logp[rows, flat_t]
    smooth = -logp.mean(axis=1)
    per_row = (1.0 - smoothing) * nll + smoothing * smooth
    value = per_row[keep].sum() / count

    def back(g):
        q = np.full_like(z, smoothing / V)
        q[rows, flat_t] += 1.0 - smoothing
        dz = (np.exp(logp) - q) * (keep[:, None] * (np.asarray(g).item() / count))
        return (dz.reshape(logits.shape),)

    return _result(np.asarray(value), "cross_entropy", (logits,), back)
