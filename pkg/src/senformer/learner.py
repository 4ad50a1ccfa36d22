"""Transformer decoder learners and their weight-sharing policies.

A learner owns a matrix of class embeddings (one learnable d-vector per
segmentation class) and refines it against the tokens of one pyramid level
through L decoder blocks.  Each block runs cross-attention (embeddings query
the level's tokens), self-attention over the embeddings, and an MLP, each
wrapped in a residual whose normalization placement is configurable
(pre-norm by default, so zeroed sub-layer outputs make the block an exact
identity).  The prediction is the dot product between the refined embeddings
and the level's feature vectors.

Sharing policies:
  none            every learner has L distinct blocks and its own embeddings
  repeated        every learner has ONE block applied L times (intra-learner)
  decoder_shared  one stack of L blocks shared by all learners (inter-learner)
  cls_shared      one embedding matrix shared by all learners; decoders as in
                  "none"
"""

from __future__ import annotations

import numpy as np

from .config import ATTENTION_STRATEGIES, ModelConfig
from .module import LayerNorm, Mlp, Module, MultiHeadAttention
from .pyramid import FeatureFusionHead, FeaturePyramid, PyramidNetwork, ToyBackbone
from .tensor import Tensor


def init_class_embeddings(n_classes: int, d: int, seed_or_rng, dtype=np.float32) -> Tensor:
    """Learnable [n_classes, d] matrix, rows i.i.d. Normal(0, 0.02^2)."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if d < 4:
        raise ValueError(f"embedding width must be at least 4, got {d}")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    return Tensor(rng.normal(0.0, 0.02, size=(n_classes, d)).astype(dtype), requires_grad=True)


def tokenize(p: Tensor) -> Tensor:
    """[d,h,w] -> [h*w,d] (or [b,d,h,w] -> [b,h*w,d]) in row-major raster order."""
    if p.ndim == 3:
        d, h, w = p.shape
        return p.transpose(1, 2, 0).reshape(h * w, d)
    b, d, h, w = p.shape
    return p.transpose(0, 2, 3, 1).reshape(b, h * w, d)


def detokenize(tokens: Tensor, h: int, w: int) -> Tensor:
    """Inverse of tokenize for the same spatial extents."""
    if tokens.ndim == 2:
        d = tokens.shape[-1]
        return tokens.reshape(h, w, d).transpose(2, 0, 1)
    b, _, d = tokens.shape
    return tokens.reshape(b, h, w, d).transpose(0, 3, 1, 2)


def cross_attention(cls: Tensor, z: Tensor, attn: MultiHeadAttention, query_norm: LayerNorm | None = None) -> Tensor:
    """cls + Attention(query=LN(cls), key=value=z); tokens are read-only."""
    q = query_norm(cls) if query_norm is not None else cls
    return cls + attn(q, z)


def predict_logits(cls: Tensor, p: Tensor) -> Tensor:
    """Per-pixel class scores: logits[k,y,x] = <cls_k, p[:,y,x]>."""
    if cls.shape[-1] != p.shape[-3]:
        raise ValueError(f"channel width mismatch: embeddings {cls.shape} vs features {p.shape}")
    squeeze = p.ndim == 3
    pb = p.reshape(1, *p.shape) if squeeze else p
    b, d, h, w = pb.shape
    tokens = pb.transpose(0, 2, 3, 1).reshape(b, h * w, d)
    logits = cls @ tokens.transpose(0, 2, 1)  # [b?, N, h*w]
    n = cls.shape[-2]
    logits = logits.reshape(logits.shape[0], n, h, w)
    return logits.reshape(n, h, w) if squeeze else logits


class DecoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4, norm_placement: str = "pre", dtype=np.float32):
        super().__init__()
        if norm_placement not in ("pre", "post"):
            raise ValueError(f"norm_placement must be 'pre' or 'post', got {norm_placement!r}")
        self.norm_placement = norm_placement
        self.norm_ca = LayerNorm(d, dtype=dtype)
        self.ca = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm_sa = LayerNorm(d, dtype=dtype)
        self.sa = MultiHeadAttention(d, heads, rng, dtype=dtype)
        self.norm_mlp = LayerNorm(d, dtype=dtype)
        self.mlp = Mlp(d, rng, ratio=mlp_ratio, dtype=dtype)

    def forward(self, cls: Tensor, z: Tensor) -> Tensor:
        if self.norm_placement == "pre":
            cls = cross_attention(cls, z, self.ca, self.norm_ca)
            normed = self.norm_sa(cls)
            cls = cls + self.sa(normed, normed)
            cls = cls + self.mlp(self.norm_mlp(cls))
        else:
            cls = self.norm_ca(cls + self.ca(cls, z))
            cls = self.norm_sa(cls + self.sa(cls, cls))
            cls = self.norm_mlp(cls + self.mlp(cls))
        return cls


class Learner(Module):
    """One decoder branch bound to a single pyramid level."""

    def __init__(self, level: int, cls: Tensor, blocks: list[DecoderBlock], num_blocks: int):
        super().__init__()
        if num_blocks < 1:
            raise ValueError(f"learner needs at least one block application, got {num_blocks}")
        self.level = level
        self.cls = cls
        self.blocks = blocks
        self.num_blocks = num_blocks

    def refine(self, p: Tensor) -> Tensor:
        """Run the L block applications; the stored embeddings are not mutated."""
        z = tokenize(p)
        c = self.cls
        for i in range(self.num_blocks):
            c = self.blocks[i % len(self.blocks)](c, z)
        return c

    def forward(self, p: Tensor) -> Tensor:
        return predict_logits(self.refine(p), p)


def learner_forward(p: Tensor, cls: Tensor, blocks: list[DecoderBlock], num_blocks: int) -> Tensor:
    """Functional form: apply blocks (cycled) num_blocks times, then predict."""
    z = tokenize(p)
    c = cls
    for i in range(num_blocks):
        c = blocks[i % len(blocks)](c, z)
    return predict_logits(c, p)


class SenFormer(Module):
    """Backbone + pyramid + M learners + merge strategy (the self-ensemble)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        from .ensemble import AttentionMergeModule  # avoid import cycle at module load

        cfg = config
        if cfg.merge in ATTENTION_STRATEGIES and cfg.learners_per_scale != 1:
            raise ValueError(f"merge={cfg.merge!r} requires exactly 4 learners")
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.backbone = ToyBackbone(rng, dtype=dtype)
        self.pyramid = PyramidNetwork(cfg.d, rng, variant=cfg.pyramid, window=cfg.window, heads=cfg.heads, dtype=dtype)

        levels = [lvl for lvl in (2, 3, 4, 5) for _ in range(cfg.learners_per_scale)]
        shared_blocks = None
        if cfg.sharing == "decoder_shared":
            shared_blocks = [
                DecoderBlock(cfg.d, cfg.heads, rng, cfg.mlp_ratio, cfg.norm_placement, dtype) for _ in range(cfg.num_blocks)
            ]
        shared_cls = None
        if cfg.sharing == "cls_shared":
            shared_cls = init_class_embeddings(cfg.n_classes, cfg.d, rng, dtype=dtype)

        learners = []
        for level in levels:
            cls = shared_cls if shared_cls is not None else init_class_embeddings(cfg.n_classes, cfg.d, rng, dtype=dtype)
            if cfg.sharing == "repeated":
                blocks = [DecoderBlock(cfg.d, cfg.heads, rng, cfg.mlp_ratio, cfg.norm_placement, dtype)]
            elif cfg.sharing in ("none", "cls_shared"):
                blocks = [
                    DecoderBlock(cfg.d, cfg.heads, rng, cfg.mlp_ratio, cfg.norm_placement, dtype)
                    for _ in range(cfg.num_blocks)
                ]
            else:  # decoder_shared
                blocks = shared_blocks
            learners.append(Learner(level, cls, blocks, cfg.num_blocks))
        self.learners = learners

        self.merge_modules = []
        if cfg.merge == "hierarchical":
            self.merge_modules = [AttentionMergeModule(cfg.n_classes, rng, dtype=dtype) for _ in range(3)]
        elif cfg.merge == "explicit":
            self.merge_modules = [AttentionMergeModule(cfg.n_classes, rng, dtype=dtype) for _ in range(4)]

    def forward(self, images: Tensor):
        """Returns (per-learner logits at native level resolution, pyramid)."""
        feats = self.backbone(images)
        pyr = self.pyramid(feats)
        logits = [learner(pyr.by_level(learner.level)) for learner in self.learners]
        return logits, pyr


class FusionBaselineModel(Module):
    """Features-fusion comparison: all levels fused into one map, one learner."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg = config
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.backbone = ToyBackbone(rng, dtype=dtype)
        self.pyramid = PyramidNetwork(cfg.d, rng, variant=cfg.pyramid, window=cfg.window, heads=cfg.heads, dtype=dtype)
        self.fusion = FeatureFusionHead(cfg.d, rng, dtype=dtype)
        cls = init_class_embeddings(cfg.n_classes, cfg.d, rng, dtype=dtype)
        if cfg.sharing == "repeated":
            blocks = [DecoderBlock(cfg.d, cfg.heads, rng, cfg.mlp_ratio, cfg.norm_placement, dtype)]
        else:
            blocks = [
                DecoderBlock(cfg.d, cfg.heads, rng, cfg.mlp_ratio, cfg.norm_placement, dtype)
                for _ in range(cfg.num_blocks)
            ]
        self.learner = Learner(2, cls, blocks, cfg.num_blocks)

    def forward(self, images: Tensor):
        feats = self.backbone(images)
        pyr = self.pyramid(feats)
        fused = self.fusion(pyr)
        return [self.learner(fused)], pyr


def build_ensemble_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SenFormer:
    return SenFormer(config, seed=seed, dtype=dtype)


def param_count(model: Module) -> dict:
    """Unique learnable-scalar counts per component (shared tensors counted once)."""
    counts = {"backbone": 0, "pyramid": 0, "decoders": 0, "embeddings": 0, "merge": 0, "other": 0}
    for name, p in model.named_parameters():
        if name.startswith("backbone."):
            bucket = "backbone"
        elif name.startswith(("pyramid.", "fusion.")):
            bucket = "pyramid"
        elif ".cls" in name or name.endswith("cls"):
            bucket = "embeddings"
        elif ".blocks." in name:
            bucket = "decoders"
        elif name.startswith("merge_modules."):
            bucket = "merge"
        else:
            bucket = "other"
        counts[bucket] += p.size
    counts["total"] = sum(counts.values())
    return counts
