"""Dense float64 tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a closure mapping the output gradient to the
input gradients. :meth:`Tensor.backward` walks that graph in reverse
topological order. Only leaves (parameters) keep a ``.grad`` buffer, and it
accumulates across calls until :meth:`Tensor.zero_grad`.

Ops are deliberately coarse (fused layer norm, masked softmax, cross entropy,
cosine matrices) so graphs stay small enough for pure numpy to be fast.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TensorFormatError(ValueError):
    """A tensor dump could not be parsed."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        # a sum is non-finite iff some entry is (short of overflow at ~1e308)
        if not math.isfinite(data.sum()):
            raise NonFiniteError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor with requires_grad")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def _add_backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._wrap(a.data + b.data, (a, b), _add_backward)


def neg(a: Tensor) -> Tensor:
    def _neg_backward(g):
        return (-g,)

    return Tensor._wrap(-a.data, (a,), _neg_backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def _mul_backward(g):
        return _unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)

    return Tensor._wrap(a.data * b.data, (a, b), _mul_backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def _exp_backward(g):
        return (g * y,)

    return Tensor._wrap(y, (a,), _exp_backward)


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")

    def _log_backward(g):
        return (g / a.data,)

    return Tensor._wrap(np.log(a.data), (a,), _log_backward)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0

    def _relu_backward(g):
        return (g * on,)

    return Tensor._wrap(a.data * on, (a,), _relu_backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences stay accurate."""
    x = a.data
    # in-place arithmetic: tanh dominates, the rest would be temporaries
    x2 = x * x
    t = x2 * (_GELU_C * 0.044715)
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def _gelu_backward(g):
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= x
        e = x2 * (3 * 0.044715 * _GELU_C)
        e += _GELU_C
        d *= e
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return Tensor._wrap(y, (a,), _gelu_backward)


# -- shape -----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def _reshape_backward(g):
        return (g.reshape(old),)

    return Tensor._wrap(a.data.reshape(shape), (a,), _reshape_backward)


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def _transpose_backward(g):
        return (g.transpose(inverse),)

    return Tensor._wrap(a.data.transpose(axes), (a,), _transpose_backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape

    def _broadcast_backward(g):
        return (_unbroadcast(g, old),)

    return Tensor._wrap(np.broadcast_to(a.data, shape).copy(), (a,), _broadcast_backward)


def getitem(a: Tensor, index) -> Tensor:
    old = a.shape

    def _getitem_backward(g):
        full = np.zeros(old)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._wrap(np.array(a.data[index]), (a,), _getitem_backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _concat_backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _concat_backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")
    return getitem(table, ids)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    old = a.shape

    def _sum_backward(g):
        if axis is None:
            return (np.broadcast_to(g, old).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), old).copy(),)

    return Tensor._wrap(np.asarray(a.data.sum(axis=axis)), (a,), _sum_backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / count)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def _matmul_backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, sa),
            None if gb is None else _unbroadcast(gb, sb),
        )

    return Tensor._wrap(a.data @ b.data, (a, b), _matmul_backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for a 2-D weight, as a single graph node."""
    if bias is None:
        return matmul(x, weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape} + {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])

    def _linear_backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        return gx, x2.T @ g2, g2.sum(axis=0)

    return Tensor._wrap((x2 @ weight.data + bias.data).reshape(*lead, weight.shape[1]), (x, weight, bias), _linear_backward)


# -- fused numerics ------------------------------------------------------------


class AttentionMask:
    """Boolean gate over an attention score matrix (True = may attend)."""

    __slots__ = ("allowed",)

    def __init__(self, allowed):
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.ndim != 2:
            raise ValueError("attention mask must be 2-D")
        if not allowed.any(axis=1).all():
            raise ValueError("every mask row needs at least one allowed entry")
        self.allowed = allowed

    @property
    def rows(self) -> int:
        return self.allowed.shape[0]

    @property
    def cols(self) -> int:
        return self.allowed.shape[1]

    @classmethod
    def full(cls, rows: int, cols: int) -> "AttentionMask":
        return cls(np.ones((rows, cols), dtype=bool))

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and np.array_equal(self.allowed, other.allowed)

    def __repr__(self) -> str:
        return f"AttentionMask({self.rows}x{self.cols}, allowed={int(self.allowed.sum())})"


def masked_softmax(logits: Tensor, mask: AttentionMask | np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked entries come out exactly zero.

    ``mask`` gates the trailing (rows, cols) block and is shared across any
    leading batch axes. A boolean array with extra leading axes is broadcast
    against the scores instead, which allows per-sample masks. The row max is
    taken over allowed entries only.
    """
    shape = logits.shape
    rows, cols = shape[-2], shape[-1]
    if mask is None:
        allowed = np.ones((1, cols), dtype=np.uint8)
    else:
        allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
        if allowed.shape[-2:] != (rows, cols):
            raise ValueError(f"mask shape {allowed.shape} does not match scores {(rows, cols)}")
        if allowed.ndim > 2:
            allowed = np.broadcast_to(allowed, shape).reshape(-1, cols)
            if not allowed.any(axis=1).all():
                raise ValueError("every mask row needs at least one allowed entry")
    y = kernels.masked_softmax_forward(logits.data.reshape(-1, cols), allowed).reshape(shape)

    def _softmax_backward(g):
        return (kernels.masked_softmax_backward(y.reshape(-1, cols), g.reshape(-1, cols)).reshape(shape),)

    return Tensor._wrap(y, (logits,), _softmax_backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs a feature dimension of at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("gain and bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def _layer_norm_backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._wrap(y, (x, gain, bias), _layer_norm_backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} do not line up")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    if t.size == 0:
        raise ValueError("cross_entropy over an empty target")
    if t.min() < 0 or t.max() >= vocab:
        raise IndexError("target id outside the vocabulary")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(t.size)
    loss = -logp[rows, t].mean()

    def _ce_backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / t.size) * p.reshape(logits.shape),)

    return Tensor._wrap(np.asarray(loss), (logits,), _ce_backward)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, as a scalar tensor."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("cosine_sim expects two vectors of equal length")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    dot = float(u.data @ v.data)
    s = dot / (nu * nv)

    def _cos_backward(g):
        gu = g * (v.data / (nu * nv) - s * u.data / nu**2)
        gv = g * (u.data / (nu * nv) - s * v.data / nv**2)
        return gu, gv

    return Tensor._wrap(np.asarray(s), (u, v), _cos_backward)


def cosine_matrix(x: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of ``x`` (..., n, d) -> (..., n, n)."""
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if (norms == 0.0).any():
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    xn = x.data / norms
    s = xn @ np.swapaxes(xn, -1, -2)

    def _cosmat_backward(g):
        gxn = (g + np.swapaxes(g, -1, -2)) @ xn
        return ((gxn - xn * (gxn * xn).sum(axis=-1, keepdims=True)) / norms,)

    return Tensor._wrap(s, (x,), _cosmat_backward)


# -- verification oracle ---------------------------------------------------------


def finite_diff_grad(
    f: Callable[[], float], params: Iterable[Tensor], eps: float = 1e-3
) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` w.r.t. each tensor in ``params``.

    ``f`` reads the parameters' current values; each coordinate is nudged in
    place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = []
    for p in params:
        flat = p.data.reshape(-1)
        est = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"objective is non-finite near coordinate {i}")
            est[i] = (hi - lo) / (2 * eps)
        out.append(est.reshape(p.shape))
    return out


# -- dump format -------------------------------------------------------------------
# little-endian: u64 rank, u64 extents[rank], f64 payload (row-major)


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f8")  # tobytes() is row-major; keeps rank 0
    fh.write(struct.pack("<Q", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TensorFormatError(f"truncated tensor dump while reading {what}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
    if rank > 16:
        raise TensorFormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "extents")) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(fh, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_nbytes(array) -> int:
    arr = np.asarray(array)
    return 8 + 8 * arr.ndim + 8 * arr.size
