"""Minimal reverse-mode automatic differentiation on numpy arrays.

Design notes:

* Define-by-run. While a ``Tape`` is active (as a context manager) every
  primitive appends a node holding its inputs and a vector-Jacobian-product
  closure. Node order is creation order, which is already topological, so the
  backward pass is a single reversed sweep that visits each node exactly once.
* All values are float64. There is no silent broadcasting: elementwise
  binary ops accept equal shapes, scalars, or a leading-dimension expansion
  (one shape being a suffix of the other). Anything else is a hard error.
  Explicit expansion goes through :func:`broadcast_to`.
* Forward values computed while recording are checked for non-finite entries
  so a NaN surfaces as a :class:`NumericFailure` naming the node instead of
  propagating silently.
* Tapes are single-threaded objects; the active tape is thread-local.

The module also carries the small optimization toolkit used by the training
loops (an RMSProp-style adaptive optimizer without momentum, global gradient
norm clipping, and a cosine schedule with linear warmup).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericFailure

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "value_and_grad",
    "add", "sub", "mul", "div", "neg", "matmul", "tensor_sum", "mean",
    "tanh", "sigmoid", "softplus", "square", "sqrt", "exp", "log",
    "reshape", "concat", "broadcast_to", "take", "scatter_add",
    "minimum", "clip",
    "RmsProp", "clip_global_norm", "cosine_warmup",
]

_TLS = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tensor:
    """Immutable-by-convention array value tracked by the active tape."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    # arithmetic sugar; all routes through module primitives
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def tensor(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise ContractViolation("tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
        """Accumulated d(output)/d(leaf) for each requested leaf.

        ``output`` must be scalar. Leaves that never fed the output get a
        zero gradient of their own shape.
        """
        if output.data.shape != ():
            raise ContractViolation(
                f"gradient target must be scalar, got shape {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): np.array(1.0)}
        for idx in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[idx]
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            partials = node.vjp(g)
            for inp, gi in zip(node.inputs, partials):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericFailure(
                        f"non-finite gradient at node {idx} ({node.op})"
                    )
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        out = []
        for leaf in leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.broadcast_to(g, leaf.data.shape).astype(np.float64, copy=True) \
                    if np.shape(g) != leaf.data.shape else np.asarray(g, dtype=np.float64)
            out.append(g)
        return out


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = _current_tape()
    out = Tensor(out_data)
    if tape is not None:
        if not np.all(np.isfinite(out_data)):
            raise NumericFailure(f"non-finite value produced by node {len(tape._nodes)} ({op})")
        tape._nodes.append(_Node(op, out, inputs, vjp))
    return out


def _check_binary(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # Equal shapes, scalar, or leading-dimension expansion (suffix match).
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ContractViolation(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    """Sum gradient over axes introduced by leading-dim expansion."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data, "add")
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(a.data.shape, g), _reduce_to(b.data.shape, g)

    return _record("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data, "sub")
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(a.data.shape, g), _reduce_to(b.data.shape, -g)

    return _record("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data, "mul")
    out = a.data * b.data

    def vjp(g):
        return _reduce_to(a.data.shape, g * b.data), _reduce_to(b.data.shape, g * a.data)

    return _record("mul", out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data, "div")
    out = a.data / b.data

    def vjp(g):
        inv = 1.0 / b.data
        return (
            _reduce_to(a.data.shape, g * inv),
            _reduce_to(b.data.shape, -g * a.data * inv * inv),
        )

    return _record("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported: 2-D @ 2-D and N-D @ 2-D (last-axis contraction)."""
    a, b = _wrap(a), _wrap(b)
    if b.data.ndim != 2 or a.data.ndim < 2:
        raise ContractViolation(
            f"matmul supports (..., k) @ (k, m); got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul: inner dimensions disagree {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        flat_a = a.data.reshape(-1, a.data.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        gb = flat_a.T @ flat_g
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(x % a.data.ndim for x in ax)
        if not keepdims:
            for x in sorted(ax):
                g = np.expand_dims(g, x)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[x] for x in ax]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record("softplus", out, (a,), vjp)


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _record("sqrt", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)
    return _record("log", out, (a,), lambda g: (g / a.data,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(parts), vjp)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit expansion: new leading axes and/or stretching size-1 axes."""
    a = _wrap(a)
    src = a.data.shape
    if len(shape) < len(src):
        raise ContractViolation(f"broadcast_to: cannot shrink {src} to {shape}")
    pad = (1,) * (len(shape) - len(src)) + src
    for axis, (s, t) in enumerate(zip(pad, shape)):
        if s != t and s != 1:
            raise ContractViolation(f"broadcast_to: {src} does not expand to {shape}")
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        axes = tuple(i for i, (s, t) in enumerate(zip(pad, shape)) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _record("broadcast", np.ascontiguousarray(out), (a,), vjp)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` (0, or 1 for batched 3-D tensors).

    Backward scatters through a cached one-hot matrix so repeated indices
    accumulate, at dense-matmul speed.
    """
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractViolation("take: indices must be one-dimensional")
    if axis == 0:
        out = a.data[idx]
    elif axis == 1 and a.data.ndim == 3:
        out = a.data[:, idx, :]
    else:
        raise ContractViolation(f"take: unsupported axis {axis} for ndim {a.data.ndim}")
    n = a.data.shape[axis]
    onehot = np.zeros((idx.size, n))
    onehot[np.arange(idx.size), idx] = 1.0

    def vjp(g):
        if axis == 0:
            flat = g.reshape(idx.size, -1)
            ga = (onehot.T @ flat).reshape((n,) + a.data.shape[1:])
        else:
            ga = np.matmul(onehot.T, g)
        return (ga,)

    return _record("take", out, (a,), vjp)


def scatter_add(a: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``a`` into ``size`` bins along axis 0 (inverse of take)."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.data.shape[0],):
        raise ContractViolation("scatter_add: need one index per leading row")
    out = np.zeros((size,) + a.data.shape[1:])
    np.add.at(out, idx, a.data)

    def vjp(g):
        return (g[idx],)

    return _record("scatter", out, (a,), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient follows the selected branch (ties go to a)."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a.data, b.data, "minimum")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def vjp(g):
        return (
            _reduce_to(a.data.shape, g * pick_a),
            _reduce_to(b.data.shape, g * ~pick_a),
        )

    return _record("minimum", out, (a, b), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is exactly zero outside the interval."""
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def vjp(g):
        return (g * inside,)

    return _record("clip", out, (a,), vjp)


def value_and_grad(f: Callable, params: Sequence[Tensor]) -> tuple[float, list[Tensor]]:
    """Evaluate ``f(params)`` under a fresh tape and return (value, gradients).

    ``f`` must return a scalar Tensor built from registered primitives; a
    non-scalar result is a contract violation, and any NaN produced along the
    way raises :class:`NumericFailure` naming the offending node.
    """
    params = list(params)
    with Tape() as tape:
        out = f(params)
        if not isinstance(out, Tensor):
            raise ContractViolation("objective must return a Tensor")
        if out.data.shape != ():
            raise ContractViolation(
                f"objective must be scalar, got shape {out.data.shape}"
            )
        grads = tape.gradients(out, params)
    return float(out.data), [Tensor(g) for g in grads]


# ---------------------------------------------------------------------------
# Optimization utilities


class RmsProp:
    """Adaptive first-order optimizer without momentum.

    Per-parameter step ``lr * g / (sqrt(v) + eps)`` with ``v`` an exponential
    moving average of squared gradients. Deterministic given the gradient
    sequence.
    """

    def __init__(self, params: Sequence[Tensor], decay: float = 0.99, eps: float = 1e-8):
        self.params = list(params)
        self.decay = decay
        self.eps = eps
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        if len(grads) != len(self.params):
            raise ContractViolation("gradient list does not match parameter list")
        for p, v, g in zip(self.params, self._v, grads):
            g = g.data if isinstance(g, Tensor) else g
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            p.data -= lr * g / (np.sqrt(v) + self.eps)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale the whole gradient list if its global L2 norm exceeds max_norm."""
    arrs = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    total = math.sqrt(sum(float((a * a).sum()) for a in arrs))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        arrs = [a * scale for a in arrs]
    return arrs, total


def cosine_warmup(step: int, base_lr: float, warmup: int, total: int,
                  min_ratio: float) -> float:
    """Linear warmup to base_lr then cosine decay to min_ratio * base_lr."""
    if total <= 0:
        return base_lr
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if step >= total:
        return base_lr * min_ratio
    span = max(total - warmup, 1)
    progress = (step - warmup) / span
    floor = base_lr * min_ratio
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
