"""Command-line surface: synth -> train -> eval -> analyze, plus gradcheck.

Heavy imports happen inside the subcommands so the SENFORMER_THREADS cap can
be applied to the numerical backend before numpy is first loaded (0 or unset
leaves the backend's own defaults in place).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys


def _apply_thread_cap():
    raw = os.environ.get("SENFORMER_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SENFORMER_THREADS must be an integer, got {raw!r}") from None
    if n > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _file_id(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]


def _parse_learners(raw: str):
    try:
        levels = tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ValueError(f"--learners expects comma-separated levels, got {raw!r}") from None
    bad = [v for v in levels if v not in (2, 3, 4, 5)]
    if bad:
        raise ValueError(f"--learners levels must be within 2..5, got {bad}")
    return levels


def cmd_synth(args) -> int:
    from .data import synth_generate
    from .serialize import save_dataset

    samples = synth_generate(args.seed, args.count, args.size, args.classes)
    save_dataset(args.out, samples, n_classes=args.classes)
    print(f"wrote {len(samples)} samples ({args.size}x{args.size}, {args.classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import RunConfig, format_config, parse_config
    from .training import train_loop

    cfg = parse_config(args.config) if args.config else RunConfig()
    os.makedirs(args.out, exist_ok=True)
    echo_path = os.path.join(args.out, "config.txt")
    with open(echo_path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    result = train_loop(cfg, out_dir=args.out, log_every=args.log_every)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {cfg.train.max_iters} iterations; checkpoint {result.checkpoint_path}")
    for key in ("loss", "miou_ensemble"):
        if key in last and last[key] is not None:
            print(f"final {key} {last[key]}")
    return 0


def cmd_eval(args) -> int:
    from .analysis import evaluate_model
    from .serialize import load_checkpoint_model, load_dataset

    model, cfg, iteration = load_checkpoint_model(args.checkpoint)
    samples = load_dataset(args.data)
    subset = _parse_learners(args.learners) if args.learners else None
    strategy = args.merge or cfg.model.merge
    scores = evaluate_model(model, samples, subset=subset, strategy=strategy)
    wanted = subset or (2, 3, 4, 5)
    for key in sorted(k for k in scores if k != "ensemble"):
        level = int(key[1])
        if level in wanted:
            print(f"{key} miou {scores[key]:.6f}")
    label = ",".join(f"d{v}" for v in wanted)
    print(f"ensemble[{strategy}:{label}] miou {scores['ensemble']:.6f}")
    return 0


def cmd_analyze(args) -> int:
    import numpy as np

    from .analysis import (
        AnalysisReport,
        Table,
        channel_variance,
        cosine_similarity_stats,
        emit_report,
        subset_ablation,
    )
    from .serialize import load_checkpoint_model, load_dataset

    model, cfg, iteration = load_checkpoint_model(args.checkpoint)
    samples = load_dataset(args.data)
    provenance = {
        "checkpoint": f"{os.path.basename(args.checkpoint)}@{_file_id(args.checkpoint)}",
        "dataset": f"{os.path.basename(args.data)}@{_file_id(args.data)}",
        "seed": str(cfg.train.seed),
    }
    report = AnalysisReport()
    if args.report == "variance":
        scores = channel_variance(model, samples)
        rows = [[k, scores[k]] for k in sorted(scores, key=lambda s: (s != "ensemble", s))]
        prov = dict(provenance, variance_convention="population (1/N), post-softmax probabilities")
        report.add(Table("channel_variance", ["output", "variance"], rows, prov))
    elif args.report == "cosine":
        mats = [lr.cls.data for lr in model.learners]
        stats = cosine_similarity_stats(mats)
        summary = []
        for i, st in enumerate(stats):
            name = f"d{model.learners[i].level}"
            summary.append([name, st["pairs"], st["skipped"], st["mean_abs"]])
            centers = 0.5 * (st["bin_edges"][:-1] + st["bin_edges"][1:])
            hist_rows = [[float(c), int(h)] for c, h in zip(centers, st["hist"])]
            report.add(Table(f"cosine_hist_{name}", ["bin_center", "count"], hist_rows, provenance))
        report.add(Table("cosine_summary", ["learner", "pairs", "skipped", "mean_abs_cos"], summary, provenance))
    else:  # ablation
        rows, learners_mean = subset_ablation(model, samples)
        table_rows = [[r["subset"], r["d2"], r["d3"], r["d4"], r["d5"], r["miou"]] for r in rows]
        table_rows.append(["mean(singletons)", 0, 0, 0, 0, learners_mean])
        report.add(Table("subset_ablation", ["subset", "d2", "d3", "d4", "d5", "miou"], table_rows, provenance))
    written = emit_report(report, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_model_gradcheck, run_op_gradchecks

    ok = True
    if args.scope == "op":
        results = run_op_gradchecks(eps=args.eps, tol=args.tol)
        for name, rep in results:
            ok &= rep.passed
            print(f"{'PASS' if rep.passed else 'FAIL'} {name} max_rel_err={rep.max_rel_err:.3e} tol={rep.tol:.0e}")
    else:
        results, worst = run_model_gradcheck(eps=args.eps, tol=args.tol)
        fails = [(n, r) for n, r in results if not r.passed]
        ok = not fails
        for name, rep in fails:
            print(f"FAIL {name} max_rel_err={rep.max_rel_err:.3e} tol={rep.tol:.0e}")
        print(f"{'PASS' if ok else 'FAIL'} model ({len(results)} parameter tensors, worst rel err {worst:.3e})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="senformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default=None, help="config file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--learners", default=None, help="comma-separated levels, e.g. 2,3,4")
    p.add_argument("--merge", default=None, choices=["average", "product", "majority", "hierarchical", "explicit"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="run a diagnostic study and emit CSV/SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, choices=["variance", "cosine", "ablation"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--scope", default="op", choices=["op", "model"])
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage; exit 2 on bad flags
        return int(exc.code or 0)
    if getattr(args, "command", None) == "gradcheck" and args.tol is None:
        args.tol = 1e-4 if args.scope == "op" else 1e-3
    try:
        return args.func(args)
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
