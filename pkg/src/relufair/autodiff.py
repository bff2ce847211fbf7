"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a ``Tensor`` wraps a numpy array and the
tape is implicit in the parent links of each node.  Every VJP is itself built
from the public primitives, so the backward pass produces a differentiable
graph and second-order quantities (Hessian-vector products) fall out of
running backward twice.

Supported primitives: add/sub/mul/div/neg, matmul (2-D), transpose, relu,
abs, exp, log, sigmoid, sum/mean, broadcast, reshape, 1-D segment slicing,
and the stable logsumexp/softmax composites built on them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# A ParameterVector is a flat 1-D float64 array of trainable values with a
# stable ordering; models own the flatten/unflatten convention.
ParameterVector = np.ndarray


class NumericError(RuntimeError):
    """An operation produced a NaN or Inf.  Carries the operation name."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite result in operation '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class Tensor:
    """Immutable dense float64 array participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor", "constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._vjp = vjp if out.requires_grad else None
    out._op = op
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a cotangent back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g if g.shape == shape else reshape(g, shape)


# -- primitives ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _node(
        "div", data, (a, b),
        lambda g: (
            _unbroadcast(div(g, b), a.shape),
            _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _node("neg", -a.data, (a,), lambda g: (neg(g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    return _node(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    return _node("transpose", a.data.T, (a,), lambda g: (transpose(g),))


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is fixed to 0 (strict inequality in the mask).
    mask = Tensor((a.data > 0.0).astype(np.float64))
    return _node("relu", np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),))


def absolute(a: Tensor) -> Tensor:
    # sign(0) == 0, matching the relu convention for the kink.
    sign = Tensor(np.sign(a.data))
    return _node("abs", np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _node("exp", data, (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _node("log", data, (a,), lambda g: (div(g, a),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))  # never overflows
    s = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _node("sigmoid", s, (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(Tensor(1.0), out))),)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g: Tensor):
        gg = g
        if axis is not None and not keepdims:
            kshape = list(a.shape)
            for ax in (axis if isinstance(axis, tuple) else (axis,)):
                kshape[ax] = 1
            gg = reshape(gg, tuple(kshape))
        return (broadcast_to(gg, a.shape),)

    return _node("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(count)))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape == tuple(shape):
        return a
    return _node(
        "broadcast", np.broadcast_to(a.data, shape).copy(), (a,),
        lambda g: (_unbroadcast(g, a.shape),),
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(
        "reshape", a.data.reshape(shape), (a,),
        lambda g: (reshape(g, a.shape),),
    )


def segment(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of a 1-D tensor; the model layer views use this."""
    if a.data.ndim != 1:
        raise ValueError("segment expects a 1-D tensor")
    return _node(
        "segment", a.data[start:stop].copy(), (a,),
        lambda g: (pad_segment(g, start, a.size),),
    )


def pad_segment(g: Tensor, start: int, total: int) -> Tensor:
    data = np.zeros(total, dtype=np.float64)
    data[start:start + g.size] = g.data
    return _node(
        "pad_segment", data, (g,),
        lambda gg: (segment(gg, start, start + g.size),),
    )


def dot(a: Tensor, b: Tensor) -> Tensor:
    return tsum(mul(a, b))


# -- composites ----------------------------------------------------------

def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    # The detached max only shifts for stability; the value and every
    # derivative of m + log(sum(exp(a - m))) are independent of m.
    m = Tensor(np.max(a.data, axis=axis, keepdims=True))
    s = tsum(exp(sub(a, m)), axis=axis, keepdims=keepdims)
    return add(log(s), reshape(m, s.shape))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, m))
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- backward pass -------------------------------------------------------

def _topo(out: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Cotangents of a scalar ``out`` w.r.t. each tensor in ``wrt``.

    The returned tensors are graph nodes themselves, so a second backward
    through them yields second-order derivatives.
    """
    if out.data.size != 1:
        raise ValueError("backward expects a scalar output")
    cot: dict[int, Tensor] = {id(out): Tensor(np.ones_like(out.data))}
    for node in reversed(_topo(out)):
        g = cot.pop(id(node), None)
        if g is None or node._vjp is None:
            if g is not None and node._vjp is None:
                cot[id(node)] = g  # leaf: keep for the wrt lookup
            continue
        cot[id(node)] = g
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = cot.get(id(parent))
            cot[id(parent)] = pg if acc is None else add(acc, pg)
    return [cot.get(id(w), Tensor(np.zeros_like(w.data))) for w in wrt]


def grad(f: Callable[[Tensor], Tensor], at: ParameterVector) -> ParameterVector:
    """Gradient of a scalar function of a flat parameter vector."""
    theta = Tensor(np.asarray(at, dtype=np.float64), requires_grad=True)
    out = f(theta)
    if out.data.size != 1:
        raise ValueError("grad expects f to be scalar-valued")
    (g,) = backward(out, [theta])
    return g.data.reshape(theta.shape).copy()


def hvp(f: Callable[[Tensor], Tensor], at: ParameterVector, v: ParameterVector) -> ParameterVector:
    """Hessian-vector product via differentiating grad(f) . v."""
    at = np.asarray(at, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if at.shape != v.shape:
        raise ValueError("hvp: v must match the parameter vector length")
    theta = Tensor(at, requires_grad=True)
    out = f(theta)
    if out.data.size != 1:
        raise ValueError("hvp expects f to be scalar-valued")
    (g,) = backward(out, [theta])
    inner = dot(g, Tensor(v))
    (h,) = backward(inner, [theta])
    return h.data.reshape(theta.shape).copy()


# -- power iteration -----------------------------------------------------

@dataclass(frozen=True)
class PowerIterationResult:
    value: float            # dominant eigenvalue (largest magnitude)
    iterations: int
    converged: bool
    negative_dominant: bool  # surfaced, not silently reported


def max_eigenvalue(
    hvp_oracle: Callable[[Array], Array],
    dim: int,
    tol: float = 1e-6,
    max_iters: int = 500,
    seed: int = 0,
) -> PowerIterationResult:
    """Dominant (largest-magnitude) eigenvalue by power iteration.

    Convergence: successive Rayleigh quotients differ by < tol.  On
    non-convergence the best estimate is returned with converged=False.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = np.inf
    lam = 0.0
    for it in range(1, max_iters + 1):
        w = np.asarray(hvp_oracle(v), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericError("max_eigenvalue", "hvp oracle returned non-finite values")
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw < 1e-300:
            return PowerIterationResult(0.0, it, True, False)
        if abs(lam - prev) < tol:
            return PowerIterationResult(lam, it, True, lam < 0)
        prev = lam
        v = w / nw
    return PowerIterationResult(lam, max_iters, False, lam < 0)
