"""Dense tensors with graph-based reverse-mode differentiation.

Every op here produces a new :class:`Tensor`; nothing is modified in place.
A result only records its parents when at least one input requires a
gradient, so inference passes over frozen weights build no graph at all.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from typing import Any

import numpy as np

DEFAULT_DTYPE = np.float32
RMS_EPS = 1e-5

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradError(RuntimeError):
    """Backward was requested on something that is not a scalar root."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: str | None = None,
    ) -> None:
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _make(
        cls, data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn
    ) -> Tensor:
        parents = tuple(parents)
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GradError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, idx: Any) -> Tensor:
        return getitem(self, idx)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), bw)


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out = x.data * sig
    return Tensor._make(out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * dinner),)

    return Tensor._make(out, (x,), bw)


# -- shape ops -------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor._make(
        np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


def _is_basic_index(idx: Any) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx: Any) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.asarray(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight: one flat GEMM each way
        k, n = b.shape
        flat = a.data.reshape(-1, k)
        out = (flat @ b.data).reshape(*a.shape[:-1], n)

        def bw_flat(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), flat.T @ g2

        return Tensor._make(out, (a, b), bw_flat)

    def bw(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable, True = keep) zeroes
    excluded entries without ever producing an infinity."""
    v = x.data
    if mask is not None:
        v = np.where(mask, v, np.finfo(v.dtype).min)
    # masked entries sit at the dtype minimum, so exp() sends them to exactly 0
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), bw)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm: gain {gain.shape} does not match features of {x.shape}")
    v = x.data
    inv = 1.0 / np.sqrt((v * v).mean(axis=-1, keepdims=True) + eps)
    normed = v * inv
    out = normed * gain.data

    def bw(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gn = g * gain.data
        d = v.shape[-1]
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * normed, gain.shape)

    return Tensor._make(out, (x, gain), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm: affine params do not match features of {x.shape}")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    c = v - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    normed = c * inv
    out = normed * gain.data + bias.data

    def bw(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gn = g * gain.data
        gx = inv * (
            gn
            - gn.mean(axis=-1, keepdims=True)
            - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * normed, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._make(out, (x, gain, bias), bw)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross entropy. ``logits`` is [..., V], ``targets`` the
    matching integer ids; ``mask`` selects which positions count."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(lp.data, targets[..., None], axis=-1)[..., 0]
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else mask.astype(logits.dtype)
    count = w.sum()
    if count == 0:
        raise ShapeError("cross_entropy: no positions selected")
    out = -(picked * w).sum() / count

    def bw(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(lp.data)
        np.put_along_axis(full, targets[..., None], (-g * w / count)[..., None], axis=-1)
        return (full,)

    return Tensor._make(np.asarray(out, dtype=logits.dtype), (lp,), bw)


def straight_through(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
                     pass_mask: np.ndarray) -> Tensor:
    """Apply a non-differentiable map; backward passes the gradient where
    ``pass_mask`` is set and blocks it elsewhere."""
    out = forward(x.data)
    return Tensor._make(out, (x,), lambda g: (np.where(pass_mask, g, 0.0).astype(g.dtype),))


# -- backward -------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Fills ``.grad`` on every reachable leaf that requires a gradient and
    returns those leaves mapped to their gradients. Gradients accumulate into
    any existing ``.grad``.
    """
    if root.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            result[node] = node.grad
            continue
        assert node._backward is not None
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return result


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
