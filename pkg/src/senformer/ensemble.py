"""Aligning per-learner predictions and merging them into one segmentation.

Average, product, and majority vote operate on per-pixel probability vectors
(post-softmax); a config switch lets averaging work on logits instead.  The
two attention strategies combine aligned logit maps with learned single-plane
masks produced by a small convolutional module, then the result is read as
logits.  The product merge is computed in log space and renormalized, which
leaves the per-pixel argmax unchanged (renormalization is a positive
per-pixel scaling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .module import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, log as tlog, clamp

PROB_FLOOR = 1e-12


@dataclass
class LearnerOutput:
    logits: Tensor  # [b?, N, h_i, w_i] at the learner's native resolution
    probs: Tensor  # softmax of logits over the class axis
    level: int


def make_learner_output(logits: Tensor, level: int) -> LearnerOutput:
    return LearnerOutput(logits=logits, probs=ops.softmax(logits, axis=-3), level=level)


def align_logits(outputs: list[Tensor], target_hw: tuple) -> list[Tensor]:
    """Bilinearly upsample every map to the target grid; exact-size maps pass through."""
    if not outputs:
        raise ValueError("align_logits: empty prediction list")
    th, tw = target_hw
    aligned = []
    for x in outputs:
        if x.shape[-2] == th and x.shape[-1] == tw:
            aligned.append(x)
        else:
            aligned.append(ops.upsample(x, th, tw, mode="bilinear"))
    return aligned


def merge_average(probs: list[Tensor]) -> Tensor:
    out = probs[0]
    for p in probs[1:]:
        out = out + p
    return out * (1.0 / len(probs))


def merge_product(probs: list[Tensor]) -> Tensor:
    """Renormalized per-pixel product, computed as softmax of summed logs."""
    total = tlog(clamp(probs[0], lo=PROB_FLOOR))
    for p in probs[1:]:
        total = total + tlog(clamp(p, lo=PROB_FLOOR))
    return ops.softmax(total, axis=-3)


def merge_majority(probs: list[Tensor]) -> Tensor:
    """Each learner contributes its confidence only at its own argmax class.

    The result generally does not sum to 1 per pixel; it is meant for argmax.
    Ties break toward the lowest class index.
    """
    kept = []
    for p in probs:
        idx = p.data.argmax(axis=-3, keepdims=True)
        mask = np.zeros_like(p.data)
        np.put_along_axis(mask, idx, 1.0, axis=-3)
        kept.append(p * Tensor(mask))
    return merge_average(kept)


class AttentionMergeModule(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv1x1 -> sigmoid;
    reads a stack of class logits, emits one mask plane in (0,1)."""

    def __init__(self, n_classes: int, rng: np.random.Generator, hidden: int = 16, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(n_classes, hidden, 3, rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm2d(hidden, dtype=dtype)
        self.conv3 = Conv2d(hidden, 1, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        h = ops.relu(self.bn1(self.conv1(x)))
        h = ops.relu(self.bn2(self.conv2(h)))
        mask = ops.sigmoid(self.conv3(h))
        return mask.reshape(*mask.shape[1:]) if squeeze else mask


def merge_hierarchical(aligned_logits: list[Tensor], modules: list[AttentionMergeModule]) -> Tensor:
    """Coarse-to-fine recursion with relative masks between adjacent scales.

    With logits ordered fine to coarse [x2, x3, x4, x5]:
        A_5 = x5;  A_i = a_i * x_i + (1 - a_i) * A_{i+1},  a_i = module_i(x_i)
    and the merged prediction is A_2.  a == 1 keeps only the finest map,
    a == 0 passes the coarsest through.
    """
    if len(modules) != len(aligned_logits) - 1:
        raise ValueError(f"hierarchical merge of {len(aligned_logits)} maps needs {len(aligned_logits) - 1} modules, got {len(modules)}")
    acc = aligned_logits[-1]
    for idx in range(len(aligned_logits) - 2, -1, -1):
        alpha = modules[idx](aligned_logits[idx])
        acc = alpha * aligned_logits[idx] + (1.0 - alpha) * acc
    return acc


def merge_explicit(aligned_logits: list[Tensor], modules: list[AttentionMergeModule]) -> Tensor:
    """Dense per-scale masks: merged = sum(w_i * x_i) / (sum(w_i) + 1e-8)."""
    if len(modules) != len(aligned_logits):
        raise ValueError(f"explicit merge of {len(aligned_logits)} maps needs {len(aligned_logits)} modules, got {len(modules)}")
    weights = [m(x) for m, x in zip(modules, aligned_logits)]
    num = weights[0] * aligned_logits[0]
    den = weights[0]
    for w, x in zip(weights[1:], aligned_logits[1:]):
        num = num + w * x
        den = den + w
    return num / (den + 1e-8)


def merge_aligned(aligned_logits: list[Tensor], strategy: str, merge_space: str = "prob", modules: list | None = None) -> Tensor:
    """Merge aligned logit maps; returns a probability map except for majority,
    whose output is an argmax score map (documented above)."""
    if strategy == "average":
        if merge_space == "logit":
            return ops.softmax(merge_average(aligned_logits), axis=-3)
        return merge_average([ops.softmax(x, axis=-3) for x in aligned_logits])
    if strategy == "product":
        return merge_product([ops.softmax(x, axis=-3) for x in aligned_logits])
    if strategy == "majority":
        return merge_majority([ops.softmax(x, axis=-3) for x in aligned_logits])
    if strategy == "hierarchical":
        return ops.softmax(merge_hierarchical(aligned_logits, modules or []), axis=-3)
    if strategy == "explicit":
        return ops.softmax(merge_explicit(aligned_logits, modules or []), axis=-3)
    raise ValueError(f"unknown merge strategy {strategy!r}")


def select_outputs(outputs: list[LearnerOutput], subset) -> list[LearnerOutput]:
    if subset is None:
        return list(outputs)
    subset = tuple(subset)
    if not subset:
        raise ValueError("empty learner subset")
    picked = [o for o in outputs if o.level in subset]
    if not picked:
        raise ValueError(f"subset {subset} matches no learner")
    return picked


def merge_outputs(outputs: list[LearnerOutput], strategy: str, merge_space: str = "prob", modules: list | None = None, out_hw: tuple | None = None) -> Tensor:
    """Align the selected outputs to their finest grid, merge, and optionally
    upsample the merged map to out_hw."""
    if strategy in ("hierarchical", "explicit"):
        if len(outputs) != 4:
            raise ValueError(f"merge={strategy!r} requires the full set of 4 learners, got {len(outputs)}")
        if not modules:
            raise ValueError(f"merge={strategy!r} needs trained attention modules")
    target = None
    for o in outputs:
        hw = (o.logits.shape[-2], o.logits.shape[-1])
        if target is None or hw[0] > target[0]:
            target = hw
    aligned = align_logits([o.logits for o in outputs], target)
    merged = merge_aligned(aligned, strategy, merge_space, modules)
    if out_hw is not None and (out_hw[0] != merged.shape[-2] or out_hw[1] != merged.shape[-1]):
        merged = ops.upsample(merged, out_hw[0], out_hw[1], mode="bilinear")
    return merged


def ensemble_predict(model, images: Tensor, subset=None, strategy: str | None = None):
    """Forward the model and merge the selected learners' predictions.

    subset selects pyramid levels (e.g. (2, 3, 4)); None means all levels.
    Returns (merged map upsampled to the input resolution, list of
    LearnerOutput for the selected learners).
    """
    strategy = strategy or model.config.merge
    logits_list, _ = model(images)
    outputs = [make_learner_output(lg, lr.level) for lg, lr in zip(logits_list, model.learners)]
    outputs = select_outputs(outputs, subset)
    if strategy in ("hierarchical", "explicit") and model.config.merge != strategy:
        raise ValueError(f"model was not built with merge={strategy!r} attention modules")
    merged_full = merge_outputs(
        outputs, strategy, model.config.merge_space, model.merge_modules,
        out_hw=(images.shape[-2], images.shape[-1]),
    )
    return merged_full, outputs
