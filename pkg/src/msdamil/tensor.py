"""Small reverse-mode automatic differentiation engine on top of numpy.

Only the operations the MIL network needs are provided.  Every operation
returns a new :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back to them.  There is no general broadcasting:
elementwise operations require equal shapes, and bias addition is its own op.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class Tensor:
    """An n-dimensional array with an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Forward passes inside this block record no graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that take part in differentiation, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar ``loss``.

    Gradients of every node in the graph are reset before accumulation, so
    calling this twice gives the same result rather than doubling.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape (n, k), weight (k, m), bias (m,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape}")

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), _bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: _accumulate(x, g.T))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), _bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: _accumulate(x, g * c))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data + c, (x,), lambda g: _accumulate(x, g))


def tensor_sum(x: Tensor) -> Tensor:
    return _result(x.data.sum(), (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape)))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _result(x.data.sum() / x.data.dtype.type(n), (x,),
                   lambda g: _accumulate(x, np.broadcast_to(g / x.data.dtype.type(n), x.shape)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: _accumulate(x, g * (1 - y * y)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # written so that NaN inputs stay NaN instead of being clipped to 0
    out = np.where(x.data <= 0, 0, x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: _accumulate(x, g * mask))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation.

    ``x`` is (c, h, w) or a batch (n, c, h, w); ``kernels`` is (k, c, r, r).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (k, c, r, r), got {kernels.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be (c, h, w) or (n, c, h, w), got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    k, kc, r, r2 = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels {kernels.shape} expect {kc}")
    if r > h or r2 > w:
        raise ShapeError(f"conv2d: kernel {kernels.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({k},)")
    ho = (h - r) // stride + 1
    wo = (w - r2) // stride + 1
    # im2col with rows (tap_i, tap_j, channel) and columns (n, ho, wo)
    cols = np.stack([xd[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                     for i in range(r) for j in range(r2)]).transpose(0, 2, 1, 3, 4)
    cols = cols.reshape(r * r2 * c, n * ho * wo)
    kmat = kernels.data.transpose(0, 2, 3, 1).reshape(k, r * r2 * c)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def _bw(g):
        g4 = g if batched else g[None]
        g2 = g4.transpose(1, 0, 2, 3).reshape(k, n * ho * wo)
        if kernels.requires_grad:
            _accumulate(kernels, (g2 @ cols.T).reshape(k, r, r2, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(r, r2, c, n, ho, wo)
            gx = np.zeros_like(xd)
            for i in range(r):
                for j in range(r2):
                    gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        gcols[i, j].transpose(1, 0, 2, 3)
            _accumulate(x, gx if batched else gx[0])

    return _result(out if batched else out[0], parents, _bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes.

    An odd trailing row or column is dropped.  Gradients go to the first
    maximal element of each window (row-major order).
    """
    if x.ndim < 2:
        raise ShapeError(f"maxpool2x2 needs at least 2 dims, got {x.shape}")
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2x2: input {x.shape} too small")
    xd = x.data
    corners = [xd[..., 0:2 * h2:2, 0:2 * w2:2], xd[..., 0:2 * h2:2, 1:2 * w2:2],
               xd[..., 1:2 * h2:2, 0:2 * w2:2], xd[..., 1:2 * h2:2, 1:2 * w2:2]]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def _bw(g):
        gx = np.zeros_like(xd)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (v == out) & ~taken
            taken |= hit
            gx[..., di:2 * h2:2, dj:2 * w2:2] = np.where(hit, g, 0)
        _accumulate(x, gx)

    return _result(np.ascontiguousarray(out), (x,), _bw)


# ---------------------------------------------------------------------------
# probabilities


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (x,), _bw)


def cross_entropy(p, q: Tensor) -> Tensor:
    """``-sum_k p_k log q_k`` with q clamped at 1e-12.

    ``p`` is a constant target.  For matrices the cross entropy is taken per
    row and a vector of length n is returned.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=q.dtype)
    if p.shape != q.shape:
        raise ValueError(f"cross_entropy: target shape {p.shape} differs from prediction {q.shape}")
    if q.ndim not in (1, 2):
        raise ShapeError(f"cross_entropy expects a vector or matrix, got {q.shape}")
    clamped = np.maximum(q.data, q.dtype.type(LOG_CLAMP))
    out = -(p * np.log(clamped)).sum(axis=-1)

    def _bw(g):
        gq = np.where(q.data > LOG_CLAMP, -p / clamped, 0).astype(q.dtype)
        _accumulate(q, gq * (g[..., None] if q.ndim == 2 else g))

    return _result(np.asarray(out, dtype=q.dtype), (q,), _bw)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x0))
        flat[i] = orig - step
        fm = float(f(x0))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       abs_floor: float = 1e-8, abs_tol: float = 1e-7) -> float:
    """Worst elementwise relative error.

    Elements whose analytic value is below ``abs_floor`` are compared
    absolutely and count as 0 when within ``abs_tol``, otherwise as inf.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    small = np.abs(a) < abs_floor
    rel = np.zeros_like(a)
    big = ~small
    rel[big] = np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big]))
    rel[small] = np.where(np.abs(a[small] - n[small]) <= abs_tol, 0.0, np.inf)
    return float(rel.max()) if rel.size else 0.0
