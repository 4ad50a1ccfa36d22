"""Composite loss and the deterministic training loop.

Per step, in fixed order: forward, loss, backward, global-norm gradient
clipping, AdamW with the poly learning-rate schedule.  The loss is the sum of
one cross-entropy per learner (logits upsampled to label resolution) plus a
weighted negative log-likelihood of the merged prediction, so every learner
is supervised independently and the ensemble is supervised as a whole.

Determinism: batch indices at iteration t come from SeedSequence([seed, t]),
and the augmentation stream of batch slot k from SeedSequence([seed, t, k+1]).
Nothing carries RNG state across iterations, which is what makes
checkpoint-resume bit-exact.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import ops, serialize
from .analysis import evaluate_model
from .config import RunConfig
from .data import SegmentationSample, augment, synth_splits
from .ensemble import make_learner_output, merge_outputs, select_outputs
from .learner import build_ensemble_model
from .optim import AdamW, clip_grad_global_norm, poly_lr
from .tensor import Tensor, clamp, log as tlog, no_grad


class TrainingDivergence(RuntimeError):
    pass


def ensemble_nll(merged: Tensor, labels: np.ndarray, ignore_index: int = ops.IGNORE_INDEX) -> Tensor:
    """Mean -log p(target) of a merged probability map, [b?,N,h,w] vs [b?,h,w].

    The map is renormalized per pixel first so strategies whose output is not
    a distribution (majority vote) still yield a well-defined likelihood; for
    average/product outputs the renormalization is a numerical no-op.
    """
    lab = np.asarray(labels)
    if merged.ndim == 3:
        merged = merged.reshape(1, *merged.shape)
        lab = lab.reshape(1, *lab.shape)
    b, n, h, w = merged.shape
    keep = lab != ignore_index
    count = int(keep.sum())
    if count == 0:
        return merged.sum() * 0.0
    onehot = np.zeros((b, n, h, w), dtype=merged.dtype.name)
    safe = np.where(keep, lab, 0)
    np.put_along_axis(onehot, safe[:, None].astype(np.int64), 1.0, axis=1)
    onehot *= keep[:, None]
    total = merged.sum(axis=1, keepdims=True)
    normed = merged / clamp(total, lo=1e-12)
    p_target = (normed * Tensor(onehot)).sum(axis=1)
    logp = tlog(clamp(p_target, lo=1e-12)) * Tensor(keep.astype(merged.dtype.name))
    return -(logp.sum() * (1.0 / count))


def total_loss(per_learner_logits: list[Tensor], merged_probs: Tensor, labels: np.ndarray, ensemble_weight: float = 1.0):
    """Sum of per-learner cross-entropies plus the weighted ensemble term.

    Learner logits are bilinearly upsampled to label resolution before the
    cross-entropy.  Returns (loss, parts) where parts names each term.
    """
    lab = np.asarray(labels)
    h, w = lab.shape[-2], lab.shape[-1]
    parts = {}
    loss = None
    for i, logits in enumerate(per_learner_logits):
        up = logits if (logits.shape[-2] == h and logits.shape[-1] == w) else ops.upsample(logits, h, w, mode="bilinear")
        ce = ops.cross_entropy(up, lab)
        parts[f"learner_{i}"] = ce
        loss = ce if loss is None else loss + ce
    if ensemble_weight != 0.0 and merged_probs is not None:
        ens = ensemble_nll(merged_probs, lab)
        parts["ensemble"] = ens
        loss = loss + ens * ensemble_weight
    return loss, parts


def forward_loss(model, images: Tensor, labels: np.ndarray, ensemble_weight: float = 1.0):
    """One training forward: per-learner logits, merge, composite loss."""
    logits_list, _ = model(images)
    lab = np.asarray(labels)
    merged = None
    if ensemble_weight != 0.0:
        outputs = [make_learner_output(lg, lr.level) for lg, lr in zip(logits_list, model.learners)]
        merged = merge_outputs(
            outputs, model.config.merge, model.config.merge_space, model.merge_modules,
            out_hw=(lab.shape[-2], lab.shape[-1]),
        )
    return total_loss(logits_list, merged, lab, ensemble_weight)


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration]))
    return rng.integers(0, n, size=batch_size)


def assemble_batch(samples: list[SegmentationSample], seed: int, iteration: int, batch_size: int, crop_size: int):
    idx = batch_indices(seed, iteration, len(samples), batch_size)
    images = []
    labels = []
    for k, i in enumerate(idx):
        rng = np.random.default_rng(np.random.SeedSequence([seed, iteration, k + 1]))
        s = augment(samples[int(i)], rng, crop_size)
        images.append(s.image)
        labels.append(s.labels)
    return Tensor(np.stack(images)), np.stack(labels)


def make_optimizer(model, cfg: RunConfig) -> AdamW:
    names_params = list(model.named_parameters())
    scales = [cfg.train.backbone_lr_mult if name.startswith("backbone.") else 1.0 for name, _ in names_params]
    return AdamW(
        [p for _, p in names_params],
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        lr_scales=scales,
    )


def train_step(model, optimizer: AdamW, images: Tensor, labels: np.ndarray, cfg: RunConfig, iteration: int) -> dict:
    model.train()
    optimizer.zero_grad()
    loss, parts = forward_loss(model, images, labels, cfg.train.ensemble_loss_weight)
    for name, term in parts.items():
        if not np.isfinite(term.data):
            raise TrainingDivergence(f"non-finite loss term {name!r} at iteration {iteration}")
    loss.backward()
    pre_norm = global_grad_norm(optimizer.params)
    clip_grad_global_norm(optimizer.params, cfg.train.clip_norm)
    lr = poly_lr(cfg.train.lr, iteration, cfg.train.max_iters, cfg.train.poly_power)
    optimizer.step(lr)
    return {"loss": float(loss.data), "lr": lr, "grad_norm": pre_norm}


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


@dataclass
class TrainResult:
    model: object
    optimizer: AdamW
    metrics: list = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics_path: str | None = None


METRIC_COLUMNS = ("iter", "loss", "lr", "grad_norm", "miou_ensemble", "miou_d2", "miou_d3", "miou_d4", "miou_d5")


def _write_metrics(path: str, rows: list):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join("" if row.get(c) is None else repr(row[c]) for c in METRIC_COLUMNS) + "\n")
    os.replace(tmp, path)


def _save_checkpoint(path: str, model, optimizer, iteration: int, cfg: RunConfig):
    serialize.save_checkpoint(path, model, optimizer=optimizer, iteration=iteration, config=cfg)


def train_loop(
    cfg: RunConfig,
    train_set: list[SegmentationSample] | None = None,
    val_set: list[SegmentationSample] | None = None,
    out_dir: str | None = None,
    model=None,
    resume_from: str | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the full schedule; returns the trained model, metrics, and paths.

    With out_dir set, writes checkpoint.senf and metrics.csv there (atomic
    replace, so an interrupted write preserves the previous checkpoint).
    """
    tcfg = cfg.train
    if train_set is None or val_set is None:
        if cfg.data.source == "synth":
            gen_train, gen_val = synth_splits(
                tcfg.seed, cfg.data.count, cfg.data.val_count, cfg.data.size, cfg.model.n_classes
            )
        else:
            gen_train = serialize.load_dataset(cfg.data.train_path)
            gen_val = serialize.load_dataset(cfg.data.val_path) if cfg.data.val_path else []
        train_set = train_set if train_set is not None else gen_train
        val_set = val_set if val_set is not None else gen_val

    if model is None:
        model = build_ensemble_model(cfg.model, seed=tcfg.seed)
    optimizer = make_optimizer(model, cfg)

    start_iter = 0
    if resume_from is not None:
        start_iter = serialize.load_into(resume_from, model, optimizer)

    ckpt_path = os.path.join(out_dir, "checkpoint.senf") if out_dir else None
    metrics_path = os.path.join(out_dir, "metrics.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    rows: list[dict] = []

    def maybe_eval(row):
        if not val_set:
            return
        scores = evaluate_model(model, val_set)
        row["miou_ensemble"] = scores["ensemble"]
        for lvl in (2, 3, 4, 5):
            key = f"d{lvl}"
            if key in scores:
                row[f"miou_{key}"] = scores[key]

    t_start = time.time()
    for it in range(start_iter, tcfg.max_iters):
        images, labels = assemble_batch(train_set, tcfg.seed, it, tcfg.batch_size, tcfg.crop_size)
        metrics = train_step(model, optimizer, images, labels, cfg, it)
        row = {"iter": it, **metrics}
        done = it + 1
        if tcfg.eval_interval > 0 and (done % tcfg.eval_interval == 0 or done == tcfg.max_iters):
            maybe_eval(row)
            if ckpt_path:
                _save_checkpoint(ckpt_path, model, optimizer, done, cfg)
                _write_metrics(metrics_path, rows + [row])
        rows.append(row)
        if log_every and done % log_every == 0:
            print(f"iter {done}/{tcfg.max_iters} loss {metrics['loss']:.4f} lr {metrics['lr']:.2e} [{time.time()-t_start:.1f}s]")

    if tcfg.max_iters == start_iter or tcfg.max_iters == 0:
        # nothing ran; still produce a checkpoint of the current state
        if ckpt_path:
            _save_checkpoint(ckpt_path, model, optimizer, start_iter, cfg)
            _write_metrics(metrics_path, rows)
    return TrainResult(model=model, optimizer=optimizer, metrics=rows, checkpoint_path=ckpt_path, metrics_path=metrics_path)
