"""Dense tensors with reverse-mode differentiation.

Tape-based autograd over float64 numpy arrays: each op records its parents
and a closure that accumulates gradients.  Only what the attention engine
needs is implemented; everything is deterministic given identical inputs
(numpy's reduction order is fixed per shape).  Every op reports its FLOP
cost to ``costs.COUNTER`` using the shared accounting convention so an
instrumented forward pass can be compared against the closed-form model.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import costs
from ._kernels import depthwise_conv3d_bwd, depthwise_conv3d_fwd


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64) if x.dtype != np.float64 else x
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Reverse pass from this node; ``grad`` defaults to 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()

        def visit(node: Tensor):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    topo.append(n)
                    continue
                if id(n) in seen or not n.requires_grad:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        self.accumulate_grad(np.asarray(grad, dtype=np.float64).reshape(self.data.shape))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _backward=backward)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_arr = _as_array(b)
        out_data = a.data + b_arr
        costs.COUNTER.add(costs.add_flops(out_data.size))

        def bw(g, a=a):
            a.accumulate_grad(_unbroadcast(g, a.data.shape))

        return _node(out_data, (a,), bw)
    out_data = a.data + b.data
    costs.COUNTER.add(costs.add_flops(out_data.size))

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_arr = _as_array(b)
        out_data = a.data * b_arr
        costs.COUNTER.add(costs.scale_flops(out_data.size))

        def bw(g, a=a, b_arr=b_arr):
            a.accumulate_grad(_unbroadcast(g * b_arr, a.data.shape))

        return _node(out_data, (a,), bw)
    out_data = a.data * b.data
    costs.COUNTER.add(costs.scale_flops(out_data.size))

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


_erf = np.vectorize(math.erf, otypes=[np.float64])


def gelu(x: Tensor) -> Tensor:
    inv_sqrt2 = 0.7071067811865476
    erf_term = _erf(x.data * inv_sqrt2)
    out_data = 0.5 * x.data * (1.0 + erf_term)
    costs.COUNTER.add(costs.gelu_flops(out_data.size))

    def bw(g, x=x, erf_term=erf_term):
        inv_sqrt2pi = 0.3989422804014327
        local = 0.5 * (1.0 + erf_term) + x.data * inv_sqrt2pi * np.exp(-0.5 * x.data * x.data)
        x.accumulate_grad(g * local)

    return _node(out_data, (x,), bw)


# -- shape ops (zero cost) --------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bw(g, x=x):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _node(out_data, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g, x=x, inv=inv):
        x.accumulate_grad(np.transpose(g, inv))

    return _node(out_data, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, tensors=tuple(tensors), offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _node(out_data, tuple(tensors), bw)


def pad_grid(x: Tensor, pad_per_axis: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad a [T, H, W, C] grid; channels never padded."""
    widths = list(pad_per_axis) + [(0, 0)]
    out_data = np.pad(x.data, widths)

    def bw(g, x=x, widths=widths):
        slices = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(widths))
        x.accumulate_grad(g[slices])

    return _node(out_data, (x,), bw)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """table[index] along axis 0; ``index`` is any integer array."""
    index = np.asarray(index)
    out_data = table.data[index]

    def bw(g, table=table, index=index):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, *table.data.shape[1:]))
        table.accumulate_grad(gt)

    return _node(out_data, (table,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; blocks all gradient flow upstream of ``x``."""
    return Tensor(x.data)


# -- contractions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched (leading axes broadcast-free) matrix product."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}"
        )
    if a.data.ndim != b.data.ndim:
        raise DimensionError(
            f"matmul rank mismatch: {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    m, n = out_data.shape[-2], out_data.shape[-1]
    k = a.data.shape[-1]
    costs.COUNTER.add(batch * costs.matmul_macs(m, k, n))

    def bw(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _node(out_data, (a, b), bw)


def relpos_bias_scores(q_heads: Tensor, r_sum: Tensor) -> Tensor:
    """bias[h, i, j] = q_heads[h, i, :] . r_sum[i, j, :].

    ``r_sum`` is the per-pair embedding block shared across heads.
    """
    out_data = np.einsum("hid,ijd->hij", q_heads.data, r_sum.data)
    h, nq, nk = out_data.shape
    d = q_heads.data.shape[-1]
    costs.COUNTER.add(costs.matmul_macs(nq * nk, d, 1) * h)

    def bw(g, q_heads=q_heads, r_sum=r_sum):
        if q_heads.requires_grad:
            q_heads.accumulate_grad(np.einsum("hij,ijd->hid", g, r_sum.data))
        if r_sum.requires_grad:
            r_sum.accumulate_grad(np.einsum("hij,hid->ijd", g, q_heads.data))

    return _node(out_data, (q_heads, r_sum), bw)


# -- fused reductions -------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis; NaN inputs propagate NaN."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    costs.COUNTER.add(costs.softmax_flops(x.data.size))

    def bw(g, x=x, out_data=out_data):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return _node(out_data, (x,), bw)


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalization over the channel (last) axis with affine transform."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * weight.data + bias.data
    costs.COUNTER.add(costs.layernorm_flops(x.data.size))

    def bw(g, x=x, weight=weight, bias=bias, xhat=xhat, inv=inv):
        n = x.data.shape[-1]
        if weight.requires_grad:
            weight.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gw = g * weight.data
            gx = inv * (
                gw
                - gw.mean(axis=-1, keepdims=True)
                - xhat * (gw * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate_grad(gx)

    return _node(out_data, (x, weight, bias), bw)


def mean_tokens(x: Tensor) -> Tensor:
    """Mean over the token (first) axis of an [N, d] tensor."""
    n, d = x.data.shape
    out_data = x.data.sum(axis=0) / n
    costs.COUNTER.add(costs.add_flops(n * d) + d)

    def bw(g, x=x, n=n):
        x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).copy())

    return _node(out_data, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array(x.data.sum()).reshape(())
    costs.COUNTER.add(costs.add_flops(x.data.size))

    def bw(g, x=x):
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _node(out_data, (x,), bw)


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logits vector."""
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    out_data = np.array(lse - z[target]).reshape(())
    costs.COUNTER.add(costs.softmax_flops(logits.data.size))

    def bw(g, logits=logits, z=z, lse=lse, target=target):
        p = np.exp(z - lse)
        p[target] -= 1.0
        logits.accumulate_grad(g * p)

    return _node(out_data, (logits,), bw)


# -- pooling / convolution --------------------------------------------------


def depthwise_conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: tuple[int, int, int],
    pad: tuple[tuple[int, int], tuple[int, int], tuple[int, int]],
) -> Tensor:
    """Per-channel strided conv on a [T, H, W, C] grid (asymmetric padding)."""
    out_data = depthwise_conv3d_fwd(x.data, weight.data, bias.data, stride, pad)
    kprod = int(np.prod(weight.data.shape[:3]))
    costs.COUNTER.add(
        costs.conv_macs(out_data.size, kprod) + costs.bias_flops(out_data.size)
    )

    def bw(g, x=x, weight=weight, bias=bias, stride=stride, pad=pad):
        need_x = x.requires_grad
        gx, gw, gb = depthwise_conv3d_bwd(
            g, x.data, weight.data, stride, pad, need_input_grad=need_x
        )
        if need_x:
            x.accumulate_grad(gx)
        if weight.requires_grad:
            weight.accumulate_grad(gw)
        if bias.requires_grad:
            bias.accumulate_grad(gb)

    return _node(out_data, (x, weight, bias), bw)


def mean_pool3d(
    x: Tensor, kernel: tuple[int, int, int], stride: tuple[int, int, int]
) -> Tensor:
    """Non-learnable window average on a [T, H, W, C] grid (no padding)."""
    kt, kh, kw = kernel
    st, sh, sw = stride
    t, h, w, c = x.data.shape
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out_data = np.zeros((to, ho, wo, c))
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                out_data += x.data[
                    i : i + to * st : st, j : j + ho * sh : sh, k : k + wo * sw : sw
                ]
    out_data /= kt * kh * kw
    costs.COUNTER.add(costs.meanpool_flops(out_data.size, kt * kh * kw))

    def bw(g, x=x, shapes=(to, ho, wo), kernel=kernel, stride=stride):
        to, ho, wo = shapes
        kt, kh, kw = kernel
        st, sh, sw = stride
        gx = np.zeros_like(x.data)
        gs = g / (kt * kh * kw)
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    gx[
                        i : i + to * st : st,
                        j : j + ho * sh : sh,
                        k : k + wo * sw : sw,
                    ] += gs
        x.accumulate_grad(gx)

    return _node(out_data, (x,), bw)


def im2col3d(
    x: np.ndarray,
    kernel: tuple[int, int, int],
    stride: tuple[int, int, int],
    pad: tuple[tuple[int, int], tuple[int, int], tuple[int, int]],
) -> np.ndarray:
    """[T, H, W, C] -> [To*Ho*Wo, kt*kh*kw*C] patch matrix (constant input)."""
    xp = np.pad(x, list(pad) + [(0, 0)])
    kt, kh, kw = kernel
    st, sh, sw = stride
    t, h, w, c = xp.shape
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    cols = np.empty((to, ho, wo, kt, kh, kw, c))
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                cols[:, :, :, i, j, k, :] = xp[
                    i : i + to * st : st, j : j + ho * sh : sh, k : k + wo * sw : sw
                ]
    return cols.reshape(to * ho * wo, kt * kh * kw * c)


# -- verification helpers ---------------------------------------------------


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure returning a scalar Tensor built
    from ``params``.  Error metric: |analytic - numeric| / max(1, |numeric|).
    """
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    for p in params:
        p.grad = None
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
