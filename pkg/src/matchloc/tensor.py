"""Minimal reverse-mode autodiff over dense numpy arrays.

Sized for toy networks: every op records a backward closure on the output
node, `Tensor.backward()` runs them in reverse topological order.  Training
runs in float32; gradient checks cast inputs to float64 and rely on numpy
promotion, so the same forward code serves both precisions.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    if grad.shape == tuple(shape):
        return grad
    # sum away added leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were broadcast from size 1
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Dense row-major tensor with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # ---- basic introspection ----
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- graph construction ----
    @staticmethod
    def _make(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accum(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    # ---- arithmetic ----
    def __add__(self, other):
        other = as_tensor(other)
        out = np.add(self.data, other.data)
        a, b = self, other

        def bwd(g):
            return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

        return Tensor._make(out, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._make(-self.data, (a,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = np.multiply(a.data, b.data)

        def bwd(g):
            return (_sum_to_shape(g * b.data, a.shape),
                    _sum_to_shape(g * a.data, b.shape))

        return Tensor._make(out, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = np.divide(a.data, b.data)

        def bwd(g):
            return (_sum_to_shape(g / b.data, a.shape),
                    _sum_to_shape(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._make(out, (a, b), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        out = self.data ** exponent

        def bwd(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._make(out, (a,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        # promote 1-D operands so the transpose-based backward stays uniform
        if a.ndim == 1:
            return (a.reshape(1, -1) @ b).reshape(*b.shape[:-2], b.shape[-1]) \
                if b.ndim > 1 else ((a * b).sum())
        if b.ndim == 1:
            return (a @ b.reshape(-1, 1)).reshape(*a.shape[:-1])
        out = np.matmul(a.data, b.data)

        def bwd(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

        return Tensor._make(out, (a, b), bwd)

    # ---- shape ops ----
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape
        return Tensor._make(a.data.reshape(shape), (a,),
                            lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self
        return Tensor._make(a.data.transpose(axes), (a,),
                            lambda g: (g.transpose(inv),))

    def swapaxes(self, ax1, ax2):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        fancy = isinstance(idx, np.ndarray) or (
            isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx))

        def bwd(g):
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return (full,)

        return Tensor._make(out, (a,), bwd)

    # ---- reductions ----
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        shape = a.data.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            g2 = g
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(x if x >= 0 else x + len(shape) for x in axes):
                    g2 = np.expand_dims(g2, ax)
            return (np.broadcast_to(g2, shape).copy(),)

        return Tensor._make(out, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        shape = self.data.shape
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- elementwise nonlinearities ----
    def relu(self):
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))

    def abs(self):
        a = self
        sign = np.sign(a.data)
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,))

    def sin(self):
        a = self
        return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))

    def cos(self):
        a = self
        return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        a = self
        # stable: log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
        out = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return Tensor._make(out, (a,), lambda g: (g * sig,))

    def clip(self, lo=None, hi=None):
        a = self
        out = np.clip(a.data, lo, hi)
        mask = np.ones_like(a.data)
        if lo is not None:
            mask = mask * (a.data >= lo)
        if hi is not None:
            mask = mask * (a.data <= hi)
        return Tensor._make(out, (a,), lambda g: (g * mask,))

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return Tensor._make(out, (a,), bwd)

    def cumsum(self, axis: int):
        a = self
        out = np.cumsum(a.data, axis=axis)

        def bwd(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            return (rev,)

        return Tensor._make(out, (a,), bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def concatenate(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(parts), bwd)


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(out, tuple(parts), bwd)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant condition mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(cond, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bwd(g):
        return (_sum_to_shape(g * mask, a.shape),
                _sum_to_shape(g * ~mask, b.shape))

    return Tensor._make(out, (a, b), bwd)


def scatter_rows_sum(num_rows: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Segment-sum `vals` (N, C) into (num_rows, C) at row indices `idx`.

    Sort + reduceat is considerably faster than np.add.at for the large
    scatters in gather/bilinear backward passes.
    """
    out = np.zeros((num_rows,) + vals.shape[1:], dtype=vals.dtype)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    starts = np.ones(len(order), dtype=bool)
    starts[1:] = sorted_idx[1:] != sorted_idx[:-1]
    boundaries = np.flatnonzero(starts)
    out[sorted_idx[boundaries]] = np.add.reduceat(vals[order], boundaries, axis=0)
    return out


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather t[idx] for a leading-axis integer index array."""
    t = as_tensor(t)
    idx = np.asarray(idx)
    out = t.data[idx]
    shape0 = t.shape[0]

    def bwd(g):
        return (scatter_rows_sum(shape0, idx, g).reshape(t.shape),)

    return Tensor._make(out, (t,), bwd)


def pad2d(t: Tensor, pad: int) -> Tensor:
    """Zero-pad the two leading spatial axes of an (H, W, C) tensor."""
    a = t
    width = ((pad, pad), (pad, pad)) + ((0, 0),) * (t.ndim - 2)
    out = np.pad(a.data, width)

    def bwd(g):
        sl = (slice(pad, g.shape[0] - pad), slice(pad, g.shape[1] - pad))
        return (g[sl],)

    return Tensor._make(out, (a,), bwd)


def grad_check(fn, inputs: list[Tensor], eps: float = 1e-5, dtype=np.float64) -> float:
    """Compare analytic gradients of `fn(inputs)` to central differences.

    `fn` must return a scalar Tensor.  The analytic pass runs at `dtype`
    (float32 measures the training-precision gradients, float64 is the tight
    check mode); the numeric reference always runs in float64.  Relative
    error uses a max(|analytic|, |numeric|, 1e-8) denominator.  Returns the
    maximum relative error over all input elements.
    """
    probes = [Tensor(np.array(t.data, dtype=dtype), requires_grad=True) for t in inputs]
    out = fn(probes)
    for p in probes:
        p.zero_grad()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in probes]

    shadows = [Tensor(np.array(t.data, dtype=np.float64)) for t in inputs]
    worst = 0.0
    with no_grad():
        for p, an in zip(shadows, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(fn(shadows).data)
                flat[i] = orig - eps
                lo = float(fn(shadows).data)
                flat[i] = orig
                num = (hi - lo) / (2 * eps)
                an_i = float(an.reshape(-1)[i])
                denom = max(abs(an_i), abs(num), 1e-8)
                worst = max(worst, abs(an_i - num) / denom)
    return worst
