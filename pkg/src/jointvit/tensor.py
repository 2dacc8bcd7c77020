"""Dense tensors with a tape-based reverse-mode autodiff.

A :class:`Tensor` is a thin wrapper over a C-contiguous numpy array. When at
least one input of an op is attached to a :class:`Tape`, the result is recorded
on that tape together with a closure that maps the output gradient to the
input gradients. Tensors without a tape node cost nothing beyond numpy.

Typical use::

    tape = Tape()
    p = tape.watch_all(params)        # name -> tracked Tensor
    loss = some_function(p)
    grads = tape.backward(loss)       # name -> Tensor
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, mixed tapes, and so on."""


def _as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return None
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100  # numpy defers to our reflected operators

    def __init__(self, data, dtype=None):
        dt = _as_dtype(dtype)
        arr = np.asarray(data)
        if dt is None:
            dt = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float32)
        self.data = np.asarray(arr, dtype=dt, order="C")
        self.node: int | None = None
        self.tape: Tape | None = None

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
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis, keepdims=False):
        return mean_axis(self, axis, keepdims)


def tensor(data, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype)


@dataclass
class _Node:
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    dtype: np.dtype
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of differentiable ops.

    Node ids are list positions, so parents always precede children and the
    reverse list order is a valid topological order for backward.
    """

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    names: dict[str, int] = field(default_factory=dict)

    def watch(self, t: Tensor | np.ndarray, name: str | None = None) -> Tensor:
        """Return a leaf tensor on this tape sharing ``t``'s buffer."""
        t = tensor(t)
        if name is not None and name in self.names:
            raise TapeError(f"parameter name {name!r} already watched on this tape")
        out = Tensor(t.data)
        self._attach(out, (), None, name)
        if name is not None:
            self.names[name] = out.node
        return out

    def watch_all(self, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
        return {name: self.watch(p, name) for name, p in params.items()}

    def _attach(self, out: Tensor, parents, backward, name=None) -> Tensor:
        out.node = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(tuple(parents), backward, out.shape, out.dtype, name))
        return out

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Populate gradients from a scalar ``loss``; return them by parameter name.

        Named leaves that ``loss`` does not depend on get zero gradients.
        """
        if loss.tape is not self:
            raise TapeError("loss is not attached to this tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.gradients = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
        for nid in range(loss.node, -1, -1):
            g = self.gradients.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                prev = self.gradients.get(pid)
                self.gradients[pid] = pg if prev is None else prev + pg
        return {name: self.grad_of(nid) for name, nid in self.names.items()}

    def grad_of(self, ref: Tensor | int) -> Tensor:
        nid = ref.node if isinstance(ref, Tensor) else ref
        if ref is None or nid is None:
            raise TapeError("tensor is not attached to a tape")
        node = self.nodes[nid]
        g = self.gradients.get(nid)
        if g is None:
            g = np.zeros(node.shape, dtype=node.dtype)
        return Tensor(np.reshape(g, node.shape))


def backward(loss: Tensor) -> dict[str, Tensor]:
    if loss.tape is None:
        raise TapeError("loss is not attached to a tape")
    return loss.tape.backward(loss)


def _record(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return out
    parents = [t.node for t in inputs]
    return tape._attach(out, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _record(a.data / b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    x = tensor(x)
    c = float(c)
    return _record(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    u = c * (xd + k * xd**3)
    th = np.tanh(u)
    y = 0.5 * xd * (1.0 + th)

    def bw(g):
        du = c * (1.0 + 3.0 * k * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * du),)

    return _record(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise IndexError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(y, (x,), bw)


def mean_axis(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axes, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with max subtraction; the axis is dropped."""
    ax = _norm_axes(axis, x.ndim)[0]
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=ax, keepdims=True)
    y = (np.log(s) + m).squeeze(ax)

    def bw(g):
        return (np.expand_dims(g, ax) * (e / s),)

    return _record(y, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last extent {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record(y, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    e = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _record(y, (x,), bw)


def _softmax_faulty(x: Tensor, axis: int = -1) -> Tensor:
    """softmax whose backward drops the normalization term.

    Negative control for gradient checking only.
    """
    ax = _norm_axes(axis, x.ndim)[0]
    e = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)
    return _record(y, (x,), lambda g: (y * g,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = tensor(x)
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record(y, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def _check_index(index, shape):
    if not isinstance(index, tuple):
        index = (index,)
    n_real = sum(i is not Ellipsis for i in index)
    if n_real > len(shape) or sum(i is Ellipsis for i in index) > 1:
        raise IndexError(f"invalid index {index!r} for shape {shape}")
    if Ellipsis in index:
        k = index.index(Ellipsis)
        index = index[:k] + (slice(None),) * (len(shape) - n_real) + index[k + 1:]
    for dim, i in enumerate(index):
        n = shape[dim]
        if isinstance(i, (int, np.integer)):
            if not -n <= i < n:
                raise IndexError(f"index {i} out of range for axis {dim} with extent {n}")
        elif isinstance(i, slice):
            if i.step is not None and i.step <= 0:
                raise IndexError("only positive slice steps are supported")
            for bound in (i.start, i.stop):
                if bound is not None and not -n <= bound <= n:
                    raise IndexError(f"slice bound {bound} out of range for axis {dim} with extent {n}")
        else:
            raise IndexError(f"unsupported index {i!r}; use ints and slices")
    return index


def slice_(x: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing; out-of-range bounds raise IndexError."""
    index = _check_index(index, x.shape)
    y = x.data[index]

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _record(y, (x,), bw)


def zero_pad_assign(x: Tensor, shape: Sequence[int], index) -> Tensor:
    """Return zeros of ``shape`` with ``x`` written at ``index``."""
    shape = tuple(shape)
    index = _check_index(index, shape)
    out = np.zeros(shape, dtype=x.dtype)
    try:
        out[index] = x.data
    except ValueError:
        raise DimensionError(f"cannot place {x.shape} at {index} inside {shape}") from None
    return _record(out, (x,), lambda g: (g[index].reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [tensor(x) for x in xs]
    ax = _norm_axes(axis, xs[0].ndim)[0]
    try:
        y = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError:
        raise DimensionError(f"cannot concat shapes {[x.shape for x in xs]} on axis {ax}") from None
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _record(y, xs, lambda g: tuple(np.split(g, bounds, axis=ax)))


def take_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick ``x[..., indices[...]]`` along the last axis; ``indices`` is not differentiated."""
    idx = np.asarray(indices)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"index shape {idx.shape} does not match {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise IndexError(f"index out of range for last extent {x.shape[-1]}")
    picked = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        return (out,)

    return _record(picked, (x,), bw)

