"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable primitive records a backward closure on the implicit
tape (the operation graph). `Tensor.backward()` replays the tape in reverse
topological order and accumulates gradients into every tensor created with
`requires_grad=True`. Gradient checking runs in float64; training code
normally runs float32.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Shape or domain violation inside a primitive."""


def _as_array(x, dtype=None):
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _prev: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._prev = _prev
        self._backward = _backward

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph replay -----------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise AutodiffError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic primitives --------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            def bw_s(g):
                if self.requires_grad:
                    self._accumulate(g)

            return Tensor(self.data + other, _prev=(self,), _backward=bw_s)
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)
        return Tensor(-self.data, _prev=(self,), _backward=bw)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            scalar = other

            def bw_s(g):
                if self.requires_grad:
                    self._accumulate(g * scalar)

            return Tensor(self.data * scalar, _prev=(self,), _backward=bw_s)
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=bw)

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise AutodiffError("only scalar exponents are supported")
        out_data = self.data ** p

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1))

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise ------------------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def log(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)
        return Tensor(np.log(self.data), _prev=(self,), _backward=bw)

    def sqrt(self):
        return self ** 0.5

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def relu(self):
        mask = self.data > 0

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor(self.data * mask, _prev=(self,), _backward=bw)

    def clamp_min(self, lo: float):
        """max(x, lo); gradient passes only where x > lo."""
        mask = self.data > lo

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor(np.maximum(self.data, lo), _prev=(self,), _backward=bw)

    def clamp(self, lo: float, hi: float):
        mask = (self.data > lo) & (self.data < hi)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor(np.clip(self.data, lo, hi), _prev=(self,), _backward=bw)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if not self.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            self._accumulate(np.broadcast_to(gg, self.shape).copy())

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return Tensor(self.data.reshape(shape), _prev=(self,), _backward=bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def bw(g):
            if self.requires_grad:
                self._accumulate(np.transpose(g, inv))

        return Tensor(np.transpose(self.data, axes), _prev=(self,), _backward=bw)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        out_data = self.data[idx]
        basic = isinstance(idx, (int, slice)) or (
            isinstance(idx, tuple)
            and all(isinstance(i, (int, slice)) for i in idx))

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                if basic:
                    full[idx] += g
                else:
                    np.add.at(full, idx, g)
                self._accumulate(full)

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def take(self, indices, axis: int):
        """Gather along `axis`; duplicate indices accumulate gradient."""
        indices = np.asarray(indices)
        out_data = np.take(self.data, indices, axis=axis)

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                src: list = [slice(None)] * self.ndim
                dst: list = [slice(None)] * self.ndim
                for j, ix in enumerate(indices):   # short index lists in practice
                    src[axis] = j
                    dst[axis] = int(ix)
                    full[tuple(dst)] += g[tuple(src)]
                self._accumulate(full)

        return Tensor(out_data, _prev=(self,), _backward=bw)

    def repeat(self, reps: int, axis: int):
        out_data = np.repeat(self.data, reps, axis=axis)

        def bw(g):
            if self.requires_grad:
                shape = list(self.shape)
                shape.insert(axis + 1, reps)
                self._accumulate(g.reshape(shape).sum(axis=axis + 1))

        return Tensor(out_data, _prev=(self,), _backward=bw)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dimensions broadcast as in numpy."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise AutodiffError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, _prev=(a, b), _backward=bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    return Tensor(out_data, _prev=tuple(tensors), _backward=bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis` (single fused primitive)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[axis] == 0:
        raise AutodiffError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor(y, _prev=(x,), _backward=bw)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1,
              bias: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (..., Lq, dk), k: (..., Lk, dk), v: (..., Lk, dv). Heads are split from
    the trailing dimension; scale is 1/sqrt(dk/heads). `bias`, if given, is
    added to the attention logits and must broadcast to (..., heads, Lq, Lk).
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    dk, dv = q.shape[-1], v.shape[-1]
    if dk % heads or dv % heads:
        raise AutodiffError(f"head count {heads} must divide dk={dk} and dv={dv}")
    if k.shape[-1] != dk:
        raise AutodiffError("query/key widths disagree")
    if k.shape[-2] != v.shape[-2]:
        raise AutodiffError("key/value lengths disagree")

    def split(t: Tensor, d: int) -> Tensor:
        # (..., L, d) -> (..., heads, L, d/heads)
        lead = t.shape[:-2]
        t = t.reshape(lead + (t.shape[-2], heads, d // heads))
        return t.swapaxes(-2, -3)

    qh, kh, vh = split(q, dk), split(k, dk), split(v, dv)
    logits = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk // heads))
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits, axis=-1)
    out = matmul(weights, vh)                       # (..., heads, Lq, dv/heads)
    out = out.swapaxes(-2, -3)                      # (..., Lq, heads, dv/heads)
    return out.reshape(out.shape[:-2] + (dv,))


def pad2d(x: Tensor, pad: int, axes: tuple[int, int]) -> Tensor:
    """Zero-pad `pad` cells on both sides of the two spatial axes."""
    widths = [(0, 0)] * x.ndim
    for ax in axes:
        widths[ax] = (pad, pad)
    out_data = np.pad(x.data, widths)
    sl = tuple(slice(pad, pad + x.shape[i]) if i in axes else slice(None)
               for i in range(x.ndim))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g[sl])

    return Tensor(out_data, _prev=(x,), _backward=bw)


def _im2col(x: Tensor, ksz: int) -> Tensor:
    """(B,H,W,Cin) -> (B,H,W,k*k*Cin) sliding same-padded patches."""
    b, h, w, cin = x.shape
    p = ksz // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, h, w, ksz * ksz * cin), dtype=x.dtype)
    for dy in range(ksz):
        for dx in range(ksz):
            j = (dy * ksz + dx) * cin
            cols[..., j:j + cin] = xp[:, dy:dy + h, dx:dx + w, :]

    def bw(g):
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for dy in range(ksz):
                for dx in range(ksz):
                    j = (dy * ksz + dx) * cin
                    gp[:, dy:dy + h, dx:dx + w, :] += g[..., j:j + cin]
            x._accumulate(gp[:, p:p + h, p:p + w, :])

    return Tensor(cols, _prev=(x,), _backward=bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2-D correlation.

    x: (B, H, W, Cin), kernel: (k, k, Cin, Cout), implemented as one
    im2col patch-gather plus a single matmul.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    kernel = kernel if isinstance(kernel, Tensor) else Tensor(kernel)
    ksz = kernel.shape[0]
    if ksz % 2 == 0 or kernel.shape[1] != ksz:
        raise AutodiffError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    if kernel.shape[2] != x.shape[-1]:
        raise AutodiffError(f"kernel in-channels {kernel.shape[2]} != input {x.shape[-1]}")
    cin, cout = kernel.shape[2], kernel.shape[3]
    cols = _im2col(x, ksz)
    out = matmul(cols, kernel.reshape(ksz * ksz * cin, cout))
    if bias is not None:
        out = out + bias
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension to zero mean / unit variance."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gain + bias


def check_finite(x: Tensor | np.ndarray, label: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise AutodiffError(f"non-finite values in {label}")


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, max_entries_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare taped gradients with central finite differences.

    `f` must return a scalar Tensor. All inputs are promoted to float64.
    Returns the maximum relative error |a-n| / max(1, |a|, |n|) over the
    checked entries. With `max_entries_per_input`, a random subset of entries
    is checked per input (seeded via `rng`).
    """
    inputs64 = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = f(*inputs64)
    check_finite(out, "grad_check output")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data)
                for t in inputs64]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(inputs64, analytic):
        flat = t.data.reshape(-1)
        n_entries = flat.size
        if max_entries_per_input is not None and n_entries > max_entries_per_input:
            idxs = rng.choice(n_entries, size=max_entries_per_input, replace=False)
        else:
            idxs = range(n_entries)
        a_flat = a.reshape(-1)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            hi = f(*inputs64).item()
            flat[j] = orig - eps
            lo = f(*inputs64).item()
            flat[j] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise AutodiffError("non-finite value during finite differencing")
            numeric = (hi - lo) / (2 * eps)
            err = abs(a_flat[j] - numeric) / max(1.0, abs(a_flat[j]), abs(numeric))
            worst = max(worst, err)
    return worst
