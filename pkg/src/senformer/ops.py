"""Neural-network operators on autodiff tensors.

Convolutions accept either [c,h,w] or [b,c,h,w] inputs; everything else keeps
whatever leading batch dimensions it is given.  Resampling is expressed as a
pair of dense per-axis interpolation matrices, which makes nearest-neighbor
replication exact and gives bilinear interpolation (align_corners=False
semantics: source coordinate (o + 0.5) * in/out - 0.5, edges replicated) a
trivially correct gradient.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _result, _unbroadcast

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    data = np.where(mask, x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _result(data, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x._accumulate(g * dx)

    return _result(data, (x,), backward)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


# -- normalizations ------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x._accumulate((g - dot) * data)

    return _result(data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    n = x.shape[axis]
    if n == 0:
        raise ValueError("layer_norm: zero-length axis")
    mean = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        if x.requires_grad:
            # d xhat/dx folded: inv * (gg - mean(gg) - xhat * mean(gg*xhat))
            m1 = gg.mean(axis=axis, keepdims=True)
            m2 = (gg * xhat).mean(axis=axis, keepdims=True)
            x._accumulate(inv * (gg - m1 - xhat * m2))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))

    return _result(data, (x, gain, bias), backward)


def batch_norm2d(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Channel-wise batch norm over [b,c,h,w]; updates running buffers in place."""
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects [b,c,h,w], got {x.shape}")
    axes = (0, 2, 3)
    shape = (1, x.shape[1], 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    data = xhat * gain.data.reshape(shape) + bias.data.reshape(shape)

    def backward(g):
        gg = g * gain.data.reshape(shape)
        if x.requires_grad:
            if training:
                m1 = gg.mean(axis=axes, keepdims=True)
                m2 = (gg * xhat).mean(axis=axes, keepdims=True)
                x._accumulate(inv.reshape(shape) * (gg - m1 - xhat * m2))
            else:
                x._accumulate(gg * inv.reshape(shape))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=axes))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=axes))

    return _result(data, (x, gain, bias), backward)


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, weight [c_out, c_in, k, k]; x may be [c,h,w] or [b,c,h,w]."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects [c,h,w] or [b,c,h,w], got {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {c_in}")
    b, _, h, w = xd.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    out = np.zeros((b, c_out, ho, wo), dtype=xd.dtype)
    # Direct convolution: one vectorized multiply-accumulate per kernel tap.
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            out += np.einsum("bihw,oi->bohw", patch, weight.data[:, :, ki, kj], optimize=True)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)
    data = out[0] if squeeze else out

    def backward(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += np.einsum(
                        "bohw,oi->bihw", gb, weight.data[:, :, ki, kj], optimize=True
                    )
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            x._accumulate(dx[0] if squeeze else dx)
        if weight.requires_grad:
            dw = np.zeros_like(weight.data)
            for ki in range(kh):
                for kj in range(kw):
                    patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    dw[:, :, ki, kj] = np.einsum("bohw,bihw->oi", gb, patch, optimize=True)
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gb.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward)


# -- resampling ----------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int, mode: str, dtype=np.float32) -> np.ndarray:
    """Dense [n_out, n_in] 1-D resampling operator (align_corners=False)."""
    if n_out <= 0 or n_in <= 0:
        raise ValueError(f"interp_matrix: non-positive size ({n_in} -> {n_out})")
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(np.int64), 0, n_in - 1)
        m[np.arange(n_out), idx] = 1
    elif mode == "bilinear":
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), lo), (1.0 - frac).astype(dtype))
        np.add.at(m, (np.arange(n_out), hi), frac.astype(dtype))
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return m


def resize_array(x: np.ndarray, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Resample trailing [h,w] axes of a plain array (no gradient)."""
    my = interp_matrix(x.shape[-2], out_h, mode, dtype=np.float64)
    mx = interp_matrix(x.shape[-1], out_w, mode, dtype=np.float64)
    out = np.tensordot(x, my, axes=([-2], [1]))  # [... , w, out_h]
    out = np.tensordot(out, mx, axes=([-2], [1]))  # [... , out_h, out_w]
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor label resize keeping integer classes intact."""
    h, w = labels.shape[-2:]
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    iy = np.clip(np.floor(src_y + 0.5).astype(np.int64), 0, h - 1)
    ix = np.clip(np.floor(src_x + 0.5).astype(np.int64), 0, w - 1)
    return labels[..., iy[:, None], ix[None, :]]


def upsample(x: Tensor, out_h: int | None = None, out_w: int | None = None, scale: int | None = None, mode: str = "nearest") -> Tensor:
    """Resample trailing [h,w] axes to (out_h, out_w), or by integer scale."""
    h, w = x.shape[-2], x.shape[-1]
    if scale is not None:
        out_h, out_w = h * int(scale), w * int(scale)
    if out_h is None or out_w is None or out_h <= 0 or out_w <= 0:
        raise ValueError(f"upsample: invalid target size ({out_h}, {out_w})")
    my = interp_matrix(h, out_h, mode, dtype=x.dtype)
    mx = interp_matrix(w, out_w, mode, dtype=x.dtype)
    data = np.einsum("...hw,yh,xw->...yx", x.data, my, mx, optimize=True)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("...yx,yh,xw->...hw", g, my, mx, optimize=True))

    return _result(data, (x,), backward)


# -- loss ----------------------------------------------------------------------

IGNORE_INDEX = 255


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over non-ignored pixels.

    logits: [n_class, n] or [b, n_class, h, w] (class axis second for 4-D).
    targets: matching integer array without the class axis.
    """
    if logits.ndim == 4:
        b, n_class, h, w = logits.shape
        flat = logits.transpose(1, 0, 2, 3).reshape(n_class, b * h * w)
        return cross_entropy(flat, np.asarray(targets).reshape(-1), ignore_index)
    n_class, n = logits.shape
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != n:
        raise ValueError(f"cross_entropy: {n} logit columns vs {t.shape[0]} targets")
    keep = t != ignore_index
    bad = keep & ((t < 0) | (t >= n_class))
    if bad.any():
        raise ValueError(f"cross_entropy: target {int(t[bad][0])} outside [0, {n_class})")
    count = int(keep.sum())
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    logp = shifted - logsumexp
    if count == 0:
        data = np.zeros((), dtype=logits.dtype)
    else:
        idx = np.where(keep)[0]
        data = np.asarray(-logp[t[idx], idx].sum() / count, dtype=logits.dtype)

    def backward(g):
        if not logits.requires_grad or count == 0:
            return
        p = np.exp(logp)
        grad = p * keep
        idx = np.where(keep)[0]
        grad[t[idx], idx] -= 1.0
        logits._accumulate(grad * (g / count))

    return _result(data, (logits,), backward)
