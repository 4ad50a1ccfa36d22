"""Finite-difference verification of analytic gradients.

The checker is the independent oracle for every differentiable operation:
it perturbs one input coordinate at a time and compares the central
difference (f(x+eps) - f(x-eps)) / (2 eps) against the gradient produced by
the reverse sweep.  Errors are normalized per coordinate by
max(1, |analytic|, |numeric|) so the tolerance acts relatively on large
gradients and absolutely on small ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    worst_coord: tuple = ()
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err <= self.tol


def finite_diff_check(
    f,
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued f at x with central differences.

    f must be deterministic; this is verified by evaluating it twice before
    any derivative work.  When max_entries is given, only that many randomly
    chosen coordinates of x are perturbed (for large parameter tensors).
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_diff_check requires a float64 input tensor")
    y0 = f(x)
    y1 = f(x)
    if not isinstance(y0, Tensor) or y0.data.size != 1:
        raise ValueError("finite_diff_check: f must return a scalar Tensor")
    if float(y0.data) != float(y1.data):
        raise ValueError("finite_diff_check: f is not deterministic (two evaluations differ)")

    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    coords = np.arange(x.data.size)
    if max_entries is not None and max_entries < coords.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(coords, size=max_entries, replace=False)
        coords.sort()

    flat = x.data.reshape(-1)
    a_flat = analytic.reshape(-1)
    max_err = 0.0
    worst = ()
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
        if err > max_err:
            max_err = err
            worst = np.unravel_index(int(i), x.shape)
    return GradCheckReport(max_rel_err=max_err, tol=tol, checked=len(coords), worst_coord=worst)


# -- randomized per-operator suite ------------------------------------------------


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def _fixed(rng, *shape, lo=None, hi=None):
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, hi, size=shape)
    return Tensor(data, dtype=np.float64)


def _op_cases(rng: np.random.Generator):
    """(name, x, f) triples covering every differentiable operator.

    Every constant a case needs is drawn once, up front, so each f is a pure
    deterministic function of its input tensor.
    """
    from . import ops
    from .ensemble import AttentionMergeModule, merge_explicit, merge_hierarchical, merge_product
    from .learner import DecoderBlock, predict_logits
    from .module import MultiHeadAttention
    from .pyramid import WindowTransformerBlock
    from .tensor import clamp, concat, log, sqrt

    cases = []

    def case(name, x, f):
        cases.append((name, x, f))

    c_add = _fixed(rng, 2, 4)
    case("add_broadcast", _rand(rng, 3, 1, 4), lambda x: (x + c_add).sum())
    c_sub = _fixed(rng, 4, 3)
    case("sub", _rand(rng, 4, 3), lambda x: (x - c_sub).sum())
    c_mul = _fixed(rng, 4)
    case("mul_broadcast", _rand(rng, 2, 3, 4), lambda x: (x * c_mul).sum())
    c_div = _fixed(rng, 3, 3, lo=0.5, hi=2.0)
    case("div", _rand(rng, 3, 3), lambda x: (x / c_div).sum())
    case("power", Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True, dtype=np.float64), lambda x: (x**3).sum())
    case("exp_log_sqrt", Tensor(rng.uniform(0.5, 2.0, size=4), requires_grad=True, dtype=np.float64),
         lambda x: log(x).sum() + sqrt(x).sum())
    case("clamp", Tensor(rng.normal(size=(6,)) * 2, requires_grad=True, dtype=np.float64), lambda x: clamp(x, -0.95, 0.95).sum())
    c_mm = _fixed(rng, 4, 2)
    case("matmul", _rand(rng, 3, 4), lambda x: (x @ c_mm).sum())
    c_mmb = _fixed(rng, 4, 3)
    case("matmul_batched", _rand(rng, 2, 3, 4), lambda x: (x @ c_mmb).sum())
    case("reshape_transpose", _rand(rng, 2, 3, 4), lambda x: (x.transpose(2, 0, 1).reshape(4, 6) ** 2).sum())
    case("concat_slice", _rand(rng, 3, 2), lambda x: concat([x, x * 2.0], axis=0)[1:4, :].sum())
    case("sum_mean", _rand(rng, 3, 4), lambda x: x.sum(axis=0).mean() + x.mean(axis=1, keepdims=True).sum())
    relu_in = rng.normal(size=(5, 5))
    relu_in += np.sign(relu_in) * 0.2  # keep inputs away from the kink
    case("relu", Tensor(relu_in, requires_grad=True, dtype=np.float64), lambda x: ops.relu(x).sum())
    case("gelu", _rand(rng, 5, 5), lambda x: ops.gelu(x).sum())
    case("sigmoid", _rand(rng, 5, 5), lambda x: (ops.sigmoid(x) ** 2).sum())
    c_soft = _fixed(rng, 3, 6)
    case("softmax", _rand(rng, 3, 6), lambda x: (ops.softmax(x, axis=-1) * c_soft).sum())

    ln_gain = _fixed(rng, 6, lo=0.5, hi=1.5)
    ln_bias = _fixed(rng, 6)
    c_ln = _fixed(rng, 4, 6)
    case("layer_norm", _rand(rng, 4, 6), lambda x: (ops.layer_norm(x, ln_gain, ln_bias) * c_ln).sum())

    bn_gain = _fixed(rng, 3, lo=0.5, hi=1.5)
    bn_bias = _fixed(rng, 3)
    c_bn = _fixed(rng, 1, 3, 4, 4)

    def bn_fn(x):
        rm = np.zeros(3)
        rv = np.ones(3)
        return (ops.batch_norm2d(x, bn_gain, bn_bias, rm, rv, training=True) * c_bn).sum()

    case("batch_norm2d", _rand(rng, 2, 3, 4, 4), bn_fn)

    w1 = _fixed(rng, 2, 3, 3, 3)
    b1 = _fixed(rng, 2)
    case("conv2d_s1", _rand(rng, 3, 5, 5), lambda x: (ops.conv2d(x, w1, b1, stride=1, padding=1) ** 2).sum())
    case("conv2d_s2", _rand(rng, 2, 3, 6, 6), lambda x: (ops.conv2d(x, w1, b1, stride=2, padding=1) ** 2).sum())
    conv_in = _fixed(rng, 3, 5, 5)
    case("conv2d_weight", Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True, dtype=np.float64),
         lambda w: (ops.conv2d(conv_in, w, padding=1) ** 2).sum())
    c_up = _fixed(rng, 2, 6, 6)
    case("upsample_nearest", _rand(rng, 2, 3, 3), lambda x: (ops.upsample(x, scale=2, mode="nearest") * c_up).sum())
    case("upsample_bilinear", _rand(rng, 2, 3, 3), lambda x: (ops.upsample(x, 5, 7, mode="bilinear") ** 2).sum())

    targets = np.array([0, 2, 1, 255, 2, 0], dtype=np.int64)
    case("cross_entropy", _rand(rng, 3, 6), lambda x: ops.cross_entropy(x, targets))

    mha = MultiHeadAttention(8, 2, np.random.default_rng(7), dtype=np.float64)
    z_fix = _fixed(rng, 5, 8)
    case("attention", _rand(rng, 3, 8), lambda q: (mha(q, z_fix) ** 2).sum())

    blk = DecoderBlock(8, 2, np.random.default_rng(8), mlp_ratio=2, dtype=np.float64)
    case("decoder_block", _rand(rng, 3, 8), lambda c: (blk(c, z_fix) ** 2).sum())
    p_fix = _fixed(rng, 8, 2, 2)
    case("predict_logits", _rand(rng, 3, 8), lambda c: (predict_logits(c, p_fix) ** 2).sum())

    wtb = WindowTransformerBlock(8, np.random.default_rng(9), window=2, heads=2, mlp_ratio=2, dtype=np.float64)
    case("window_block", _rand(rng, 8, 3, 3), lambda x: (wtb(x) ** 2).sum())

    att3 = [AttentionMergeModule(3, np.random.default_rng(10 + i), hidden=4, dtype=np.float64) for i in range(3)]
    att4 = [AttentionMergeModule(3, np.random.default_rng(20 + i), hidden=4, dtype=np.float64) for i in range(4)]
    for m in att3 + att4:
        m.eval()
    fixed_maps = [_fixed(rng, 3, 4, 4) for _ in range(3)]
    case("merge_hierarchical", _rand(rng, 3, 4, 4), lambda x: (merge_hierarchical([x] + fixed_maps, att3) ** 2).sum())
    case("merge_explicit", _rand(rng, 3, 4, 4), lambda x: (merge_explicit([x] + fixed_maps, att4) ** 2).sum())

    probs_fixed = [_fixed(rng, 3, 2, 2, lo=0.1, hi=1.0) for _ in range(3)]
    case("merge_product", _rand(rng, 3, 2, 2), lambda x: (merge_product([ops.softmax(x, axis=0)] + probs_fixed) ** 2).sum())
    return cases


def run_op_gradchecks(eps: float = 1e-5, tol: float = 1e-4, seed: int = 0):
    """Gradient-check every differentiable operator on small random shapes."""
    rng = np.random.default_rng(seed)
    results = []
    for name, x, f in _op_cases(rng):
        results.append((name, finite_diff_check(f, x, eps=eps, tol=tol)))
    return results


def run_model_gradcheck(eps: float = 1e-5, tol: float = 1e-3, seed: int = 0, coords_per_param: int = 2):
    """Finite differences through the whole model (toy config, float64).

    For every parameter tensor, a few sampled coordinates are perturbed while
    the full forward + composite loss is treated as a function of that tensor.
    Returns (list of (param name, report), overall max rel err).
    """
    from .config import ModelConfig
    from .learner import build_ensemble_model
    from .training import forward_loss

    cfg = ModelConfig(d=16, n_classes=2, num_blocks=2, sharing="repeated", merge="average", pyramid="fpnt")
    model = build_ensemble_model(cfg, seed=seed, dtype=np.float64)
    model.train()
    rng = np.random.default_rng(seed + 1)
    images = Tensor(rng.random((1, 3, 32, 32)), dtype=np.float64)
    labels = rng.integers(0, 2, size=(1, 32, 32)).astype(np.int64)
    labels[0, :2, :2] = 255  # exercise the ignore path

    import zlib

    results = []
    worst = 0.0
    for name, p in model.named_parameters():
        def f(_p):
            model.zero_grad()
            loss, _ = forward_loss(model, images, labels, ensemble_weight=1.0)
            return loss

        coord_rng = np.random.default_rng(zlib.crc32(name.encode()))
        report = finite_diff_check(f, p, eps=eps, tol=tol, max_entries=coords_per_param, rng=coord_rng)
        results.append((name, report))
        worst = max(worst, report.max_rel_err)
    return results, worst
