"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation records its parents and a closure that maps the output
gradient to input gradients. ``Tensor.backward`` topologically sorts the
graph reachable from a scalar and walks it in reverse, visiting each node
once. Image-shaped operations accept either a single image ``(C, H, W)`` or
a batch ``(N, C, H, W)``; batch reductions always run in index order so the
summation order is fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64
LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    code = "E_SHAPE"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "log_data", "_logits")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE, order="C")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        # set by channel_softmax: exact log-probabilities and the logits they came from
        self.log_data: Optional[np.ndarray] = None
        self._logits: Optional[Tensor] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires grad.

    Leaf gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise / reductions ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def fn(g):
        ga = g if a.data.size == g.size else np.full(a.shape, g.sum())
        gb = g if b.data.size == g.size else np.full(b.shape, g.sum())
        return ga, gb

    return _make(a.data + b.data, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def fn(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.size != ga.size:
            ga = np.full(a.shape, ga.sum())
        if b.data.size != gb.size:
            gb = np.full(b.shape, gb.sum())
        return ga, gb

    return _make(a.data * b.data, (a, b), fn, "mul")


def tensor_sum(t: Tensor) -> Tensor:
    return _make(np.array(t.data.sum()), (t,), lambda g: (np.full(t.shape, float(g)),), "sum")


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def fn(g):
        return (g * mask,)

    return _make(t.data * mask, (t,), fn, "relu")


# -- image helpers -------------------------------------------------------------


def _batched(arr: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ShapeError(f"{name}: expected (C,H,W) or (N,C,H,W), got shape {arr.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, stride: int,
            ho: int, wo: int, hp: int, wp: int) -> np.ndarray:
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def _conv_out(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel {axis}={k} larger than padded input {axis}={size + 2 * padding}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of ``x`` (C_in,H,W) with ``kernel`` (C_out,C_in,kh,kw)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x.data, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (C_out,C_in,kh,kw), got shape {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    n, c, h, w = xd.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has C_in={c} channels but kernel expects C_in={ci}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={co}")
    ho = _conv_out(h, kh, stride, padding, "H")
    wo = _conv_out(w, kw, stride, padding, "W")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    k2 = kernel.data.reshape(co, -1)
    out = np.matmul(k2, cols).reshape(n, co, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        g = g.reshape(n, co, ho * wo)
        gk = gx = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if x.requires_grad:
            gcols = np.matmul(k2.T, g)
            gxp = _col2im(gcols, c, kh, kw, stride, ho, wo, h + 2 * padding, w + 2 * padding)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            gx = gx[0] if squeeze else gx
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out[0] if squeeze else out, parents, fn, "conv2d")


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     output_padding: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernel`` is (C_in,C_out,kh,kw).

    With the same kernel array and geometry, this is exactly the gradient of
    ``conv2d`` with respect to its input.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, squeeze = _batched(x.data, "conv_transpose2d input")
    if kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d: kernel must be (C_in,C_out,kh,kw), got shape {kernel.shape}")
    ci, co, kh, kw = kernel.shape
    n, c, h, w = xd.shape
    if c != ci:
        raise ShapeError(f"conv_transpose2d: input has C_in={c} channels but kernel expects C_in={ci}")
    if stride < 1 or padding < 0 or not 0 <= output_padding < stride:
        raise ShapeError(f"conv_transpose2d: invalid stride={stride} / padding={padding} "
                         f"/ output_padding={output_padding}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match C_out={co}")
    hp = (h - 1) * stride + kh + output_padding
    wp = (w - 1) * stride + kw + output_padding
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding={padding} leaves empty output ({ho}x{wo})")
    k2 = kernel.data.reshape(ci, -1)
    xr = xd.reshape(n, ci, h * w)
    cols = np.matmul(k2.T, xr)
    out = _col2im(cols, co, kh, kw, stride, h, w, hp, wp)[:, :, padding:padding + ho, padding:padding + wo]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, hp - ho - padding), (padding, wp - wo - padding)))
        gcols = _im2col(gp, kh, kw, stride, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.matmul(k2, gcols).reshape(n, ci, h, w)
            gx = gx[0] if squeeze else gx
        if kernel.requires_grad:
            gk = np.tensordot(xr, gcols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    def fn_outer(g):
        g4 = g[None] if squeeze else g
        return fn(g4)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out[0] if squeeze else out, parents, fn_outer, "conv_transpose2d")


def channel_softmax(t: Tensor) -> Tensor:
    """Softmax over the channel axis, computed after max subtraction."""
    d, squeeze = _batched(t.data, "channel_softmax")
    if not np.all(np.isfinite(d)):
        raise ValueError("channel_softmax: input contains NaN or Inf")
    shifted = d - d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e.sum(axis=1, keepdims=True)
    y = e / s
    logp = shifted - np.log(s)

    def fn(g):
        g4 = g[None] if squeeze else g
        gx = y * (g4 - (g4 * y).sum(axis=1, keepdims=True))
        return (gx[0] if squeeze else gx,)

    out = _make(y[0] if squeeze else y, (t,), fn, "channel_softmax")
    out.log_data = logp[0] if squeeze else logp
    out._logits = t
    return out


def max_pool2x2(t: Tensor) -> Tensor:
    d, squeeze = _batched(t.data, "max_pool2x2")
    n, c, h, w = d.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2: H={h} and W={w} must both be even")
    blocks = d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        g4 = g[None] if squeeze else g
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx[0] if squeeze else gx,)

    return _make(out[0] if squeeze else out, (t,), fn, "max_pool2x2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels: incompatible ranks {a.shape} and {b.shape}")
    axis = a.ndim - 3
    if a.shape[:axis] + a.shape[axis + 1:] != b.shape[:axis] + b.shape[axis + 1:]:
        raise ShapeError(f"concat_channels: non-channel dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[axis]

    def fn(g):
        if axis == 0:
            return g[:ca], g[ca:]
        return g[:, :ca], g[:, ca:]

    return _make(np.concatenate([a.data, b.data], axis=axis), (a, b), fn, "concat_channels")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are used.
    """
    d, squeeze = _batched(x.data, "batch_norm")
    n, c, h, w = d.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must be ({c},), got {gamma.shape} / {beta.shape}")
    if training:
        mean = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        count = n * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def fn(g):
        g4 = g[None] if squeeze else g
        gg = (g4 * xhat).sum(axis=(0, 2, 3))
        gbeta = g4.sum(axis=(0, 2, 3))
        gxhat = g4 * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return (gx[0] if squeeze else gx), gg, gbeta

    return _make(out[0] if squeeze else out, (x, gamma, beta), fn, "batch_norm")


def weighted_nll(probs: Tensor, target: np.ndarray, weight: np.ndarray, eps: float = LOG_EPS) -> Tensor:
    """``-sum(weight * log(probs[target]))`` over all pixels.

    ``target`` holds a channel index per pixel and ``weight`` a per-pixel
    coefficient; both have the shape of ``probs`` without the channel axis.

    When ``probs`` came out of :func:`channel_softmax` the log is taken from
    the exact log-softmax and the gradient goes straight to the logits, so
    saturated pixels still receive ``weight * (y - onehot)``. For any other
    input the probabilities are clipped to ``[eps, 1 - eps]`` and the
    gradient is zero where the clip is active.
    """
    d, squeeze = _batched(probs.data, "weighted_nll")
    target = np.asarray(target)
    weight = np.asarray(weight, dtype=DTYPE)
    t4 = target[None] if squeeze else target
    w4 = weight[None] if squeeze else weight
    if t4.shape != (d.shape[0],) + d.shape[2:] or w4.shape != t4.shape:
        raise ShapeError(f"weighted_nll: target {target.shape} / weight {weight.shape} "
                         f"do not match probabilities {probs.shape}")
    if t4.size and (t4.min() < 0 or t4.max() >= d.shape[1]):
        raise ShapeError(f"weighted_nll: target channel out of range [0, {d.shape[1]})")
    idx = t4[:, None].astype(np.intp)

    if probs.log_data is not None and probs._logits is not None:
        logp = probs.log_data[None] if squeeze else probs.log_data
        loss = -(w4 * np.take_along_axis(logp, idx, axis=1)[:, 0]).sum()

        def fn_fused(g):
            gz = d * w4[:, None]
            np.put_along_axis(gz, idx, np.take_along_axis(gz, idx, axis=1) - w4[:, None], axis=1)
            gz *= float(g)
            return (gz[0] if squeeze else gz,)

        return _make(np.array(loss), (probs._logits,), fn_fused, "weighted_nll")

    picked = np.take_along_axis(d, idx, axis=1)[:, 0]
    clipped = np.clip(picked, eps, 1.0 - eps)
    loss = -(w4 * np.log(clipped)).sum()

    def fn(g):
        inside = (picked > eps) & (picked < 1.0 - eps)
        gp = np.where(inside, -w4 / clipped, 0.0) * float(g)
        gx = np.zeros_like(d)
        np.put_along_axis(gx, idx, gp[:, None], axis=1)
        return (gx[0] if squeeze else gx,)

    return _make(np.array(loss), (probs,), fn, "weighted_nll")


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update. Parameter arrays are replaced, not mutated."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ShapeError(f"adam_step: params and grads name sets differ: {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name!r} has shape {g.shape}, param has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``arr`` (mutated and restored)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return out


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)
