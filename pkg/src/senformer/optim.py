"""AdamW with decoupled weight decay, global-norm clipping, poly schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base_lr * (1 - iter/max_iter)^power, clamped to 0 past the end."""
    if max_iter <= 0:
        return 0.0
    frac = min(max(iteration / max_iter, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def clip_grad_global_norm(params: list[Tensor], max_norm: float = 3.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the scale that was applied (1.0 when no clipping occurred).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    s = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= s
    return s


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Each group is (params, lr_scale); the effective learning rate of a group
    at a step is lr * lr_scale, which is how the backbone gets its reduced
    learning rate.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
        lr_scales: list[float] | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("lr_scales must match params length")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v, s in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            step_lr = lr * s
            # param <- param - lr*(m_hat/(sqrt(v_hat)+eps)) - lr*wd*param
            p.data -= step_lr * (m_hat / (np.sqrt(v_hat) + self.eps)) + step_lr * self.weight_decay * p.data

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        """Flat view of the optimizer state for checkpointing."""
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        out["step"] = np.array([self.step_count], dtype=np.int32)
        return out

    def load_state_arrays(self, arrays: dict):
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m.{i}"].copy()
            self.v[i] = arrays[f"v.{i}"].copy()
        self.step_count = int(arrays["step"][0])
