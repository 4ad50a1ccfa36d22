"""Minimal parameter-container base class and the layers the model is built from.

Parameters are Tensors with requires_grad=True discovered by scanning instance
attributes in insertion order, so parameter naming and iteration order are
deterministic given a fixed construction order.  Buffers (batch-norm running
statistics) are plain numpy arrays declared via ``buffer_names``.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std^2) resampled until all values fall within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype=np.float32) -> np.ndarray:
    std = float(np.sqrt(2.0 / (c_in * k * k)))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)


class Module:
    """Base container; subclasses assign Tensors, Modules, or lists of Modules."""

    buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if name == "training":
                continue
            yield name, value

    def _walk_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk_parameters(full + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub._walk_parameters(f"{full}.{i}.")

    def named_parameters(self, prefix: str = ""):
        """Unique parameters in construction order; shared tensors appear once
        (under the first name that reaches them)."""
        seen = set()
        for name, p in self._walk_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _walk_buffers(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if name in type(self).buffer_names:
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk_buffers(full + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub._walk_buffers(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        seen = set()
        for name, buf in self._walk_buffers(prefix):
            if id(buf) not in seen:
                seen.add(id(buf))
                yield name, buf

    def train(self, mode: bool = True):
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for sub in value:
                    sub.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return (x @ self.weight) + self.bias


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        self.weight = Tensor(kaiming_conv(rng, c_out, c_in, kernel, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gain, self.bias, self.running_mean, self.running_var, self.training)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, axis=-1)


class MultiHeadAttention(Module):
    """Projections + scaled dot-product attention; query and key/value sources
    may differ (cross-attention) or coincide (self-attention)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)

    def forward(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        if kv_src.shape[-2] == 0:
            raise ValueError("attention: empty key/value sequence")
        squeeze = q_src.ndim == 2 and kv_src.ndim == 2
        if q_src.ndim == 2:
            q_src = q_src.reshape(1, *q_src.shape)
        if kv_src.ndim == 2:
            kv_src = kv_src.reshape(1, *kv_src.shape)
        nq, nk, d = q_src.shape[1], kv_src.shape[1], self.dim
        dh = d // self.heads

        def split(x):
            b, n, _ = x.shape
            return x.reshape(b, n, self.heads, dh).transpose(0, 2, 1, 3)

        q = split(self.q_proj(q_src))
        k = split(self.k_proj(kv_src))
        v = split(self.v_proj(kv_src))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / float(np.sqrt(dh)))
        attn = ops.softmax(scores, axis=-1)
        mixed = attn @ v  # leading batch dims broadcast between q and kv
        out = mixed.transpose(0, 2, 1, 3).reshape(mixed.shape[0], nq, d)
        out = self.out_proj(out)
        return out.reshape(nq, d) if squeeze else out


class Mlp(Module):
    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(dim, dim * ratio, rng, dtype)
        self.fc2 = Linear(dim * ratio, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
