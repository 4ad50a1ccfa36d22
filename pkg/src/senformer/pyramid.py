"""Backbone features and the top-down feature pyramid.

The backbone is a deliberately small stride-correct extractor: a stem of two
stride-2 3x3 convolutions followed by three stride-2 stages, each convolution
wrapped in BatchNorm + ReLU, producing {C2..C5} at strides 4/8/16/32 with
channel widths (16, 32, 64, 128).

The pyramid projects each C_i to a shared width d with a 1x1 lateral
convolution, then runs the top-down pass

    P5 = P'5
    P_i = Smooth(P'_i + Upsample2x(P'_{i+1}))   for i in {4, 3, 2}

where Upsample is nearest-neighbor and Smooth is either a 3x3 convolution
(variant "fpn") or a window-based transformer block (variant "fpnt").  The
"none" variant keeps only the lateral projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .module import BatchNorm2d, Conv2d, LayerNorm, Mlp, Module, MultiHeadAttention
from .tensor import Tensor, concat, pad2d

BACKBONE_CHANNELS = (16, 32, 64, 128)
PYRAMID_LEVELS = (2, 3, 4, 5)


@dataclass
class BackboneFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor

    def levels(self):
        return [(2, self.c2), (3, self.c3), (4, self.c4), (5, self.c5)]


@dataclass
class FeaturePyramid:
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self):
        return [(2, self.p2), (3, self.p3), (4, self.p4), (5, self.p5)]

    def by_level(self, level: int) -> Tensor:
        return {2: self.p2, 3: self.p3, 4: self.p4, 5: self.p5}[level]


def _batched(x: Tensor):
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [c,h,w] or [b,c,h,w], got {x.shape}")


def _debatch(x: Tensor, squeezed: bool) -> Tensor:
    return x.reshape(*x.shape[1:]) if squeezed else x


class ConvBNReLU(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class ToyBackbone(Module):
    """Stride-4..32 feature extractor standing in for a pretrained backbone."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        c2, c3, c4, c5 = BACKBONE_CHANNELS
        self.stem1 = ConvBNReLU(3, c2 // 2, 3, rng, stride=2, dtype=dtype)
        self.stem2 = ConvBNReLU(c2 // 2, c2, 3, rng, stride=2, dtype=dtype)
        self.stage3 = ConvBNReLU(c2, c3, 3, rng, stride=2, dtype=dtype)
        self.stage4 = ConvBNReLU(c3, c4, 3, rng, stride=2, dtype=dtype)
        self.stage5 = ConvBNReLU(c4, c5, 3, rng, stride=2, dtype=dtype)

    def forward(self, image: Tensor) -> BackboneFeatures:
        x, squeezed = _batched(image)
        h, w = x.shape[-2], x.shape[-1]
        if h % 32 or w % 32:
            raise ValueError(
                f"input spatial size {h}x{w} not divisible by 32; pad the image to a multiple of 32 first"
            )
        c2 = self.stem2(self.stem1(x))
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return BackboneFeatures(*(_debatch(c, squeezed) for c in (c2, c3, c4, c5)))


class WindowTransformerBlock(Module):
    """Pre-norm self-attention + MLP inside non-overlapping square windows.

    Maps whose sides are not multiples of the window are zero-padded, attended,
    and cropped back, so tokens in different windows never mix.
    """

    def __init__(self, dim: int, rng: np.random.Generator, window: int = 4, heads: int = 4, mlp_ratio: int = 4, dtype=np.float32):
        super().__init__()
        self.window = window
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, rng, ratio=mlp_ratio, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x, squeezed = _batched(x)
        b, d, h, w = x.shape
        win = self.window
        if win >= h and win >= w:
            # One window covers the map: full self-attention, no padding.
            t = x.transpose(0, 2, 3, 1).reshape(b, h * w, d)
            n1 = self.norm1(t)
            t = t + self.attn(n1, n1)
            t = t + self.mlp(self.norm2(t))
            out = t.reshape(b, h, w, d).transpose(0, 3, 1, 2)
            return _debatch(out, squeezed)
        ph = (-h) % win
        pw = (-w) % win
        if ph or pw:
            x = pad2d(x, (0, ph), (0, pw))
        hp, wp = h + ph, w + pw
        nh, nw = hp // win, wp // win
        # [b,d,hp,wp] -> [b*nh*nw, win*win, d]
        t = x.transpose(0, 2, 3, 1).reshape(b, nh, win, nw, win, d)
        t = t.transpose(0, 1, 3, 2, 4, 5).reshape(b * nh * nw, win * win, d)
        n1 = self.norm1(t)
        t = t + self.attn(n1, n1)
        t = t + self.mlp(self.norm2(t))
        # back to the map layout
        t = t.reshape(b, nh, nw, win, win, d).transpose(0, 1, 3, 2, 4, 5)
        out = t.reshape(b, hp, wp, d).transpose(0, 3, 1, 2)
        if ph or pw:
            out = out[:, :, :h, :w]
        return _debatch(out, squeezed)


class PyramidNetwork(Module):
    """Lateral projections plus the chosen top-down smoothing variant."""

    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        variant: str = "fpnt",
        window: int = 4,
        heads: int = 4,
        in_channels: tuple = BACKBONE_CHANNELS,
        dtype=np.float32,
    ):
        super().__init__()
        if variant not in ("fpn", "fpnt", "none"):
            raise ValueError(f"unknown pyramid variant {variant!r}")
        self.d = d
        self.variant = variant
        self.laterals = [Conv2d(c, d, 1, rng, dtype=dtype) for c in in_channels]
        if variant == "fpn":
            self.smooth = [Conv2d(d, d, 3, rng, dtype=dtype) for _ in range(3)]
        elif variant == "fpnt":
            self.smooth = [WindowTransformerBlock(d, rng, window=window, heads=heads, dtype=dtype) for _ in range(3)]
        else:
            self.smooth = []

    def forward(self, feats: BackboneFeatures) -> FeaturePyramid:
        lat = [conv(c) for conv, (_, c) in zip(self.laterals, feats.levels())]
        if self.variant == "none":
            return FeaturePyramid(*lat)
        p5 = lat[3]
        out = [None, None, None, p5]
        for idx in (2, 1, 0):  # levels 4, 3, 2
            merged = lat[idx] + ops.upsample(lat[idx + 1], scale=2, mode="nearest")
            out[idx] = self.smooth[idx](merged)
        return FeaturePyramid(*out)


class FeatureFusionHead(Module):
    """Resize every pyramid level to the finest grid, concatenate, and fuse.

    This is the features-fusion alternative to the ensemble: one decoder sees
    a single fused map instead of four learners seeing one level each.
    """

    def __init__(self, d: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fuse = Conv2d(4 * d, d, 3, rng, dtype=dtype)
        self.bn = BatchNorm2d(d, dtype=dtype)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        p2, squeezed = _batched(pyr.p2)
        h, w = p2.shape[-2], p2.shape[-1]
        maps = [p2]
        for p in (pyr.p3, pyr.p4, pyr.p5):
            pb, _ = _batched(p)
            maps.append(ops.upsample(pb, h, w, mode="bilinear"))
        fused = concat(maps, axis=1)
        out = ops.relu(self.bn(self.fuse(fused)))
        return _debatch(out, squeezed)
