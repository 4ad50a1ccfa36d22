"""Evaluation metrics and the diagnostic studies, plus CSV/SVG report emission.

mIoU follows the standard benchmark convention: per-class IoU is
TP / (TP + FP + FN), classes absent from both prediction and ground truth are
excluded from the mean, and 255-labeled pixels never enter the confusion
matrix.

The channel-variance study computes, for every pixel, the population (1/N)
variance of its class-probability vector, averages over pixels and then over
images, for the ensemble output and for each learner.  The cosine study
histograms cos(cls_k, cls_l) over all embedding row pairs k < l of each
learner on 40 uniform bins spanning [-1, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import ATTENTION_STRATEGIES
from .ensemble import make_learner_output, merge_outputs, select_outputs
from .tensor import Tensor, no_grad

IGNORE_LABEL = 255
COSINE_BINS = 40


class ConfusionMatrix:
    """rows = ground truth, columns = prediction; ignore pixels excluded."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray):
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"gt {gt.shape} vs pred {pred.shape}")
        keep = gt != IGNORE_LABEL
        gt = gt[keep].astype(np.int64)
        pred = pred[keep].astype(np.int64)
        flat = np.bincount(gt * self.n_classes + pred, minlength=self.n_classes**2)
        self.counts += flat.reshape(self.n_classes, self.n_classes)

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts


def miou(cm: ConfusionMatrix):
    """Returns (per-class IoU array, NaN where excluded; NaN-free mean)."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    valid = denom > 0
    if not valid.any():
        raise ValueError("no evaluable classes (every class absent from prediction and ground truth)")
    iou = np.full(cm.n_classes, np.nan)
    iou[valid] = tp[valid] / denom[valid]
    return iou, float(iou[valid].mean())


def _batches(samples, batch_size):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        images = Tensor(np.stack([s.image for s in chunk]))
        labels = np.stack([s.labels for s in chunk])
        yield images, labels


def _learner_key(model, index: int) -> str:
    level = model.learners[index].level
    per_scale = sum(1 for lr in model.learners if lr.level == level)
    if per_scale == 1:
        return f"d{level}"
    nth = sum(1 for lr in model.learners[:index] if lr.level == level)
    return f"d{level}_{nth}"


def _full_res_probs(output, h, w):
    p = output.probs
    if p.shape[-2] == h and p.shape[-1] == w:
        return p
    return ops.upsample(p, h, w, mode="bilinear")


def evaluate_model(model, samples, subset=None, strategy: str | None = None, batch_size: int = 8) -> dict:
    """mIoU of the merged prediction and of every learner over a dataset."""
    strategy = strategy or model.config.merge
    n_classes = model.config.n_classes
    was_training = model.training
    model.eval()
    cms = {"ensemble": ConfusionMatrix(n_classes)}
    keys = [_learner_key(model, i) for i in range(len(model.learners))]
    for k in keys:
        cms[k] = ConfusionMatrix(n_classes)
    try:
        with no_grad():
            for images, labels in _batches(samples, batch_size):
                h, w = labels.shape[-2:]
                logits_list, _ = model(images)
                outputs = [make_learner_output(lg, lr.level) for lg, lr in zip(logits_list, model.learners)]
                picked = select_outputs(outputs, subset)
                merged = merge_outputs(picked, strategy, model.config.merge_space, model.merge_modules, out_hw=(h, w))
                cms["ensemble"].update(labels, merged.data.argmax(axis=-3))
                for key, out in zip(keys, outputs):
                    probs = _full_res_probs(out, h, w)
                    cms[key].update(labels, probs.data.argmax(axis=-3))
    finally:
        model.train(was_training)
    return {name: miou(cm)[1] for name, cm in cms.items()}


ABLATION_SUBSETS = ((2,), (3,), (4,), (5,), (2, 3, 4), (2, 3, 4, 5))


def subset_ablation(model, samples, strategy: str = "average", batch_size: int = 8):
    """mIoU for the six learner combinations plus the singleton mean.

    Needs a parameter-free strategy (partial subsets are undefined for the
    attention merges).  Returns (rows, learners_mean) where each row is
    {"subset": "...", "d2": 0/1, ..., "miou": float}.
    """
    if strategy in ATTENTION_STRATEGIES:
        raise ValueError(f"subset ablation requires a parameter-free merge strategy, not {strategy!r}")
    n_classes = model.config.n_classes
    was_training = model.training
    model.eval()
    cms = {s: ConfusionMatrix(n_classes) for s in ABLATION_SUBSETS}
    try:
        with no_grad():
            for images, labels in _batches(samples, batch_size):
                h, w = labels.shape[-2:]
                logits_list, _ = model(images)
                outputs = [make_learner_output(lg, lr.level) for lg, lr in zip(logits_list, model.learners)]
                for sub in ABLATION_SUBSETS:
                    picked = select_outputs(outputs, sub)
                    merged = merge_outputs(picked, strategy, model.config.merge_space, model.merge_modules, out_hw=(h, w))
                    cms[sub].update(labels, merged.data.argmax(axis=-3))
    finally:
        model.train(was_training)
    rows = []
    singleton = {}
    for sub in ABLATION_SUBSETS:
        score = miou(cms[sub])[1]
        if len(sub) == 1:
            singleton[sub[0]] = score
        rows.append(
            {
                "subset": "+".join(f"d{v}" for v in sub),
                **{f"d{lvl}": int(lvl in sub) for lvl in (2, 3, 4, 5)},
                "miou": score,
            }
        )
    learners_mean = float(np.mean([singleton[lvl] for lvl in (2, 3, 4, 5)]))
    return rows, learners_mean


def channel_variance(model, samples, batch_size: int = 8) -> dict:
    """Mean per-pixel population variance of the class-probability vector."""
    was_training = model.training
    model.eval()
    sums = {}
    counts = {}

    def push(key, probs_data):
        v = probs_data.var(axis=-3)  # population (1/N) convention
        per_image = v.mean(axis=(-2, -1))
        sums[key] = sums.get(key, 0.0) + float(np.atleast_1d(per_image).sum())
        counts[key] = counts.get(key, 0) + int(np.atleast_1d(per_image).size)

    try:
        with no_grad():
            for images, labels in _batches(samples, batch_size):
                h, w = labels.shape[-2:]
                logits_list, _ = model(images)
                outputs = [make_learner_output(lg, lr.level) for lg, lr in zip(logits_list, model.learners)]
                merged = merge_outputs(outputs, model.config.merge, model.config.merge_space, model.merge_modules, out_hw=(h, w))
                push("ensemble", merged.data)
                for i, out in enumerate(outputs):
                    push(_learner_key(model, i), _full_res_probs(out, h, w).data)
    finally:
        model.train(was_training)
    return {k: sums[k] / counts[k] for k in sums}


def cosine_similarity_stats(cls_matrices: list[np.ndarray], bins: int = COSINE_BINS) -> list[dict]:
    """Pairwise cosine histogram per learner embedding matrix.

    Pairs with a zero-norm row are skipped and counted in "skipped".
    """
    edges = np.linspace(-1.0, 1.0, bins + 1)
    out = []
    for mat in cls_matrices:
        mat = np.asarray(mat, dtype=np.float64)
        n = mat.shape[0]
        if n < 2:
            raise ValueError(f"need at least 2 embedding rows, got {n}")
        norms = np.linalg.norm(mat, axis=1)
        cos_values = []
        skipped = 0
        for k in range(n):
            for l in range(k + 1, n):
                if norms[k] == 0.0 or norms[l] == 0.0:
                    skipped += 1
                    continue
                cos_values.append(float(mat[k] @ mat[l] / (norms[k] * norms[l])))
        cos_values = np.asarray(cos_values)
        hist, _ = np.histogram(np.clip(cos_values, -1.0, 1.0), bins=edges)
        out.append(
            {
                "hist": hist,
                "bin_edges": edges,
                "mean_abs": float(np.abs(cos_values).mean()) if cos_values.size else float("nan"),
                "pairs": int(cos_values.size),
                "skipped": skipped,
            }
        )
    return out


# -- report emission -------------------------------------------------------------


@dataclass
class Table:
    name: str
    columns: list
    rows: list
    provenance: dict = field(default_factory=dict)


@dataclass
class AnalysisReport:
    tables: list = field(default_factory=list)

    def add(self, table: Table):
        self.tables.append(table)


def _format_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def render_table_csv(table: Table) -> str:
    lines = [f"# {k}={table.provenance[k]}" for k in sorted(table.provenance)]
    lines.append(",".join(table.columns))
    for row in table.rows:
        lines.append(",".join(_format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def read_table_csv(path: str):
    """Inverse of render_table_csv; numbers come back as float/int exactly."""
    provenance = {}
    columns = None
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                provenance[key] = value
                continue
            cells = line.split(",")
            if columns is None:
                columns = cells
                continue
            parsed = []
            for c in cells:
                try:
                    parsed.append(int(c))
                except ValueError:
                    try:
                        parsed.append(float(c))
                    except ValueError:
                        parsed.append(c)
            rows.append(parsed)
    return Table(name=os.path.basename(path)[:-4], columns=columns or [], rows=rows, provenance=provenance)


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_table_svg(table: Table, width: int = 640, height: int = 400) -> str:
    """Line chart of every numeric column against the row index."""
    margin = 48
    numeric_cols = []
    for j, col in enumerate(table.columns):
        values = [row[j] for row in table.rows]
        if values and all(isinstance(v, (int, float, np.integer, np.floating)) for v in values):
            numeric_cols.append((col, [float(v) for v in values]))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{margin}" y="20" font-family="monospace" font-size="14">{table.name}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    finite = [v for _, vals in numeric_cols for v in vals if np.isfinite(v)]
    if finite and len(table.rows) > 0:
        lo, hi = min(finite), max(finite)
        if hi == lo:
            hi = lo + 1.0
        n = max(len(table.rows) - 1, 1)
        for ci, (col, vals) in enumerate(numeric_cols):
            color = _SVG_COLORS[ci % len(_SVG_COLORS)]
            pts = []
            for i, v in enumerate(vals):
                if not np.isfinite(v):
                    continue
                x = margin + (width - 2 * margin) * (i / n)
                y = height - margin - (height - 2 * margin) * ((v - lo) / (hi - lo))
                pts.append(f"{x:.2f},{y:.2f}")
            if pts:
                parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
            parts.append(
                f'<text x="{width - margin + 4}" y="{margin + 16 * ci}" font-family="monospace" font-size="11" fill="{color}">{col}</text>'
            )
        parts.append(f'<text x="{margin}" y="{height - margin + 16}" font-family="monospace" font-size="11">min={repr(lo)} max={repr(hi)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def emit_report(report: AnalysisReport, out_dir: str) -> list[str]:
    """One CSV and one SVG per table, deterministic bytes, overwrite in place."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for table in report.tables:
        csv_path = os.path.join(out_dir, f"{table.name}.csv")
        svg_path = os.path.join(out_dir, f"{table.name}.svg")
        try:
            with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(render_table_csv(table))
            with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(render_table_svg(table))
        except OSError as exc:
            raise OSError(f"report emission failed for {csv_path}: {exc}") from exc
        written.extend([csv_path, svg_path])
    return written
