"""Dense tensors with reverse-mode automatic differentiation.

Everything is float64. A ``Tensor`` is one node of a computation graph:
it holds the forward value, references to its parents, and a closure
that pushes an incoming gradient into them. Complex values are carried
as pairs of real tensors (``ComplexTensor``), so differentiation is
plain real-valued reverse mode over the (re, im) buffers; no Wirtinger
calculus is involved because every operation in the network is already
written in separated real/imaginary form.

A ``Tape`` is the registry of trainable leaves for one training step.
``Tape.backward(loss)`` walks the graph once, in reverse topological
order, and returns one gradient array per registered leaf.

Conventions baked into this module:

* every op validates its output for NaN/Inf and raises ``NumericError``
* the derivative of ReLU at exactly 0 is taken to be 0
* ``grad_check`` excludes entries whose central difference straddles a
  kink (detected by disagreeing one-sided differences) instead of
  failing on them
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "ComplexTensor",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "div",
    "matmul",
    "pow_const",
    "tanh",
    "exp",
    "log",
    "relu",
    "softplus",
    "softmax",
    "log_softmax",
    "layernorm",
    "crelu",
    "complex_affine",
    "topo_order",
    "grad_check",
    "grad_check_report",
    "GradCheckReport",
]


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A node in the computation graph holding a float64 array.

    ``grad`` is populated by ``Tape.backward`` and is always an array of
    the same shape as ``data``. Tensors with no parents act as leaves or
    constants; whether the gradient is reported depends on tape
    registration, not on the node itself.
    """

    __slots__ = ("data", "grad", "_parents", "_backprop", "_op")

    def __init__(
        self,
        data,
        _parents: tuple = (),
        _backprop: Callable[[np.ndarray], None] | None = None,
        _op: str = "const",
    ):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backprop = _backprop
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A constant copy of this node; gradients stop here."""
        return Tensor(self.data, _op="detach")

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self._op!r}, shape={self.shape})"


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data

    def backprop(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, (a, b), backprop, "add")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backprop(g):
        a._accumulate(-g)

    return Tensor(-a.data, (a,), backprop, "neg")


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data

    def backprop(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, (a, b), backprop, "mul")


def div(a, b) -> Tensor:
    return mul(a, pow_const(b, -1.0))


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast (batched matmul)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}"
        )
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"matmul: batch dimensions do not broadcast, {a.shape} @ {b.shape}"
        ) from None

    def backprop(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, (a, b), backprop, "matmul")


def pow_const(a, exponent: float) -> Tensor:
    a = _wrap(a)
    exponent = float(exponent)
    if not exponent.is_integer() and np.any(a.data < 0):
        raise DomainError("pow: fractional power of a negative value")
    out_data = a.data**exponent

    def backprop(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, (a,), backprop, f"pow{exponent}")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backprop(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, (a,), backprop, "tanh")


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backprop(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, (a,), backprop, "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def backprop(g):
        a._accumulate(g / a.data)

    return Tensor(out_data, (a,), backprop, "log")


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backprop(g):
        # derivative at the kink (input exactly 0) is defined as 0
        a._accumulate(g * (a.data > 0.0))

    return Tensor(out_data, (a,), backprop, "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated without overflow for large |x|."""
    a = _wrap(a)
    out_data = np.logaddexp(0.0, a.data)

    def backprop(g):
        a._accumulate(g * _sigmoid(a.data))

    return Tensor(out_data, (a,), backprop, "softplus")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backprop(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(out_data, (a,), backprop, "reshape")


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backprop(g):
        a._accumulate(g.transpose(inverse))

    return Tensor(out_data, (a,), backprop, "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(ax % ndim for ax in axis)
    return (axis % ndim,)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out_data = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backprop(g):
        if axes is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, (a,), backprop, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    if axes is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the max shift is treated as a constant."""
    a = _wrap(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(shift))
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


def layernorm(x, gamma, beta, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then scale and shift.

    ``gamma`` and ``beta`` must be vectors matching the normalized axis.
    The ``eps`` guard keeps a zero-variance slice finite (it collapses
    to ``beta``).
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if eps <= 0:
        raise ContractError("layernorm: eps must be positive")
    ax = axis % x.ndim
    n = x.shape[ax]
    if n == 0:
        raise DimensionError("layernorm: zero-length axis")
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (n,):
            raise DimensionError(
                f"layernorm: {name} has shape {t.shape}, expected ({n},)"
            )
    bshape = [1] * x.ndim
    bshape[ax] = n
    mu = tmean(x, axis=ax, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=ax, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    xhat = mul(centered, inv)
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape))


@dataclass
class ComplexTensor:
    """A complex array carried as two real tensors of identical shape."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        self.re = _wrap(self.re)
        self.im = _wrap(self.im)
        if self.re.shape != self.im.shape:
            raise DimensionError(
                f"complex tensor: re {self.re.shape} != im {self.im.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def reshape(self, shape) -> "ComplexTensor":
        return ComplexTensor(reshape(self.re, shape), reshape(self.im, shape))

    def transpose(self, axes) -> "ComplexTensor":
        return ComplexTensor(transpose(self.re, axes), transpose(self.im, axes))

    def swapaxes(self, a: int, b: int) -> "ComplexTensor":
        return ComplexTensor(swapaxes(self.re, a, b), swapaxes(self.im, a, b))

    def mean(self, axis=None, keepdims: bool = False) -> "ComplexTensor":
        return ComplexTensor(
            tmean(self.re, axis, keepdims), tmean(self.im, axis, keepdims)
        )

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(add(self.re, other.re), add(self.im, other.im))


def crelu(h: ComplexTensor) -> ComplexTensor:
    """ReLU applied independently to the real and imaginary parts."""
    return ComplexTensor(relu(h.re), relu(h.im))


def complex_affine(
    A, B, h: ComplexTensor, bias: ComplexTensor | None = None
) -> ComplexTensor:
    """Left-multiply ``h`` by the complex weight ``A + iB``.

    Computes ``(A + iB)(a + ib) = (Aa - Bb) + i(Ba + Ab)`` with optional
    per-row complex bias. ``h`` may carry leading batch dimensions.
    """
    A, B = _wrap(A), _wrap(B)
    if A.shape != B.shape:
        raise DimensionError(f"complex_affine: A {A.shape} != B {B.shape}")
    if A.ndim != 2:
        raise DimensionError("complex_affine: weights must be matrices")
    if h.re.ndim < 2 or A.shape[1] != h.shape[-2]:
        raise DimensionError(
            f"complex_affine: weight {A.shape} does not apply to input {h.shape}"
        )
    re = sub(matmul(A, h.re), matmul(B, h.im))
    im = add(matmul(B, h.re), matmul(A, h.im))
    if bias is not None:
        m = A.shape[0]
        if bias.shape != (m,):
            raise DimensionError(
                f"complex_affine: bias has shape {bias.shape}, expected ({m},)"
            )
        re = add(re, reshape(bias.re, (m, 1)))
        im = add(im, reshape(bias.im, (m, 1)))
    return ComplexTensor(re, im)


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every parent before its children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


class Tape:
    """Registry of trainable leaves for one differentiation pass."""

    def __init__(self):
        self._leaves: dict[str, Tensor] = {}

    def leaf(self, name: str, array) -> Tensor:
        if name in self._leaves:
            raise ContractError(f"leaf {name!r} registered twice")
        t = Tensor(array, _op=f"leaf:{name}")
        self._leaves[name] = t
        return t

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse accumulation from ``loss`` down to every registered leaf.

        Returns one gradient array per leaf, shape-matching it; leaves
        the loss does not depend on get zeros.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        order = topo_order(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backprop is None or node.grad is None:
                continue
            _ensure_finite(node.grad, f"backward:{node._op}")
            node._backprop(node.grad)
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._leaves.items()
        }


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference check of the backward pass."""

    max_rel_error: float
    per_leaf: dict[str, float]
    checked: int
    skipped: int


def _eval_value(f, arrays: dict[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {k: tape.leaf(k, v) for k, v in arrays.items()}
    out = f(leaves)
    if out.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    return float(out.data.reshape(()))


def grad_check_report(
    f,
    leaves: dict[str, np.ndarray],
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a dict of leaf tensors to a scalar tensor and must be
    deterministic (freeze any noise before calling). Entries where the
    two one-sided differences disagree are sitting on a kink; they are
    skipped rather than failed. ``sample`` bounds the number of entries
    probed per leaf (deterministic choice via ``rng``), for checks on
    models too large to enumerate.
    """
    tape = Tape()
    tensors = {k: tape.leaf(k, v) for k, v in leaves.items()}
    out = f(tensors)
    if out.size != 1:
        raise ContractError("grad_check: f must return a scalar")
    analytic = tape.backward(out)
    base = float(out.data.reshape(()))

    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in leaves.items()}
    per_leaf: dict[str, float] = {}
    checked = 0
    skipped = 0
    max_err = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        indices: Iterable[int] = range(flat.size)
        if sample is not None and flat.size > sample:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = sorted(gen.choice(flat.size, size=sample, replace=False))
        leaf_err = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval_value(f, work)
            flat[i] = orig - eps
            fm = _eval_value(f, work)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            fwd = (fp - base) / eps
            bwd = (base - fm) / eps
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                skipped += 1
                continue
            checked += 1
            err = abs(grad_flat[i] - fd) / max(1.0, abs(fd))
            leaf_err = max(leaf_err, err)
        per_leaf[name] = leaf_err
        max_err = max(max_err, leaf_err)
    return GradCheckReport(max_err, per_leaf, checked, skipped)


def grad_check(
    f,
    leaves: dict[str, np.ndarray],
    eps: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(f, leaves, eps=eps, sample=sample, rng=rng).max_rel_error
