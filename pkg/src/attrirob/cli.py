"""Command line entry point.

Subcommands: train, eval, attack, simulate, consistency, theorem.  Each
accepts ``--config`` plus ``--seed`` / ``--out`` overrides.  Exit codes:
0 success, 2 configuration error, 3 numerical divergence.  The
``ATTRIROB_THREADS`` environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _config(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, seed=args.seed, out=args.out)
    cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _model(args, cfg):
    from .ndcore import MlpModel

    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "checkpoint.json"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path} (run 'train' first or pass --checkpoint)")
    return MlpModel.load(path)


def cmd_train(args) -> int:
    from .experiment import run_train

    cfg = _config(args)
    _, log, _, _ = run_train(cfg)
    last = log.records[-1] if log.records else None
    msg = f"trained {cfg.train.epochs} epochs -> {cfg.out}"
    if last:
        msg += f" (natural acc {last.natural_accuracy:.3f}, adversarial acc {last.adversarial_accuracy:.3f})"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import build_dataset, run_eval

    cfg = _config(args)
    model = _model(args, cfg)
    _, test_ds = build_dataset(cfg.dataset, cfg.seed)
    report = run_eval(model, test_ds, cfg.attack, cfg.eval, cfg.out, cfg.seed)
    s = report.summary
    print(f"evaluated {s['n_evaluated']} samples ({s['n_skipped']} skipped) -> {cfg.out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    from .experiment import EVAL_COLUMNS, attack_rows, build_dataset, fmt_value, write_rows

    cfg = _config(args)
    model = _model(args, cfg)
    _, test_ds = build_dataset(cfg.dataset, cfg.seed)
    overrides = {k: v for k, v in (("epsilon", args.eps), ("alpha", args.alpha), ("steps", args.steps),
                                   ("restarts", args.restarts), ("k", args.k)) if v is not None}
    if "epsilon" in overrides and "alpha" not in overrides:
        overrides["alpha"] = overrides["epsilon"] / 10
    try:
        acfg = replace(cfg.attack, clip_range=test_ds.value_range, m_eval=cfg.eval.m_eval, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    n = len(test_ds) if cfg.eval.n_samples is None else min(cfg.eval.n_samples, len(test_ds))
    rows, skipped, _ = attack_rows(model, test_ds.inputs[:n], test_ds.labels[:n], acfg, args.objective,
                                   (cfg.seed, 20))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_rows(Path(args.out) / "attack.csv", EVAL_COLUMNS, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([fmt_value(r[c]) for c in EVAL_COLUMNS])
    if skipped:
        print(f"skipped {len(skipped)} misclassified samples", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .experiment import write_json, write_rows
    from .theoremlab import simulate_tau_cos

    cfg = _config(args)
    dim = args.dim if args.dim is not None else cfg.simulate.dim
    n = args.n if args.n is not None else cfg.simulate.n_samples
    try:
        res = simulate_tau_cos(dim, n, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "simulate.csv", ("cosine", "tau"), [{"cosine": s.cosine, "tau": s.tau} for s in res.samples])
    write_json(out / "simulate_summary.json", res.summary())
    print(f"association {res.association:.4f} over {n} samples (dim {dim}) -> {out}")
    return EXIT_OK


def cmd_consistency(args) -> int:
    from .attacks import pgd
    from .consistency import activation_consistency, record_activation_trace
    from .experiment import build_dataset

    cfg = _config(args)
    model = _model(args, cfg)
    _, test_ds = build_dataset(cfg.dataset, cfg.seed)
    n = len(test_ds) if cfg.eval.n_samples is None else min(cfg.eval.n_samples, len(test_ds))
    X, y = test_ds.inputs[:n], test_ds.labels[:n]
    if n == 0:
        raise ConfigError("no samples to evaluate")
    acfg = replace(cfg.attack, clip_range=test_ds.value_range, steps=cfg.eval.pgd_steps)
    X_adv = pgd(model, "cross_entropy", X, y, acfg, seed=[(cfg.seed, 21, i) for i in range(n)])
    res = activation_consistency(record_activation_trace(model, X), record_activation_trace(model, X_adv), detail=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["model_id", "dataset", "consistency"] + [f"layer_{i}" for i in range(len(res.per_layer))]
    with open(out / "consistency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        w.writerow([args.model_id or model.meta.get("loss_kind", "model"), test_ds.name, repr(res.value),
                     *[repr(v) for v in res.per_layer]])
    print(f"activation consistency {res.value:.4f} -> {out / 'consistency.csv'}")
    return EXIT_OK


def cmd_theorem(args) -> int:
    from .experiment import write_json
    from .theoremlab import conditional_tau_ordering, pearson_instability_demo, sequence_success_rate

    cfg = _config(args)
    spec = cfg.theorem
    result = {"ordering": [], "seed": cfg.seed}
    for op in ("exchange", "scale"):
        for d in spec.dims:
            est = conditional_tau_ordering(d, spec.trials, op, seed=(cfg.seed, d))
            result["ordering"].append({"op": op, "dim": d, "mean_diff": est.mean_diff, "std_error": est.std_error,
                                       "z": est.z, "n_accepted": est.n_accepted, "low_power": est.low_power})
    rates = sequence_success_rate(spec.sequence_dims, spec.sequence_trials, seed=cfg.seed)
    result["sequence_success"] = {str(d): r for d, r in rates.items()}
    demo = pearson_instability_demo(spec.pearson_dim, seed=cfg.seed)
    result["pearson_demo"] = None if demo is None else {
        "rho_plus": demo.rho_plus, "rho_minus": demo.rho_minus, "attempts": demo.attempts}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "theorem.json", result)
    print(f"theorem checks -> {out / 'theorem.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrirob", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=False):
        sp.add_argument("--config", required=need_config, help="experiment JSON config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        return sp

    common(sub.add_parser("train", help="adversarial training (+IGR)")).set_defaults(fn=cmd_train)
    ev = common(sub.add_parser("eval", help="IFIA / PGD / consistency evaluation"))
    ev.add_argument("--checkpoint")
    ev.set_defaults(fn=cmd_eval)
    at = common(sub.add_parser("attack", help="run one attack, CSV per sample"))
    at.add_argument("--checkpoint")
    at.add_argument("--eps", type=float)
    at.add_argument("--alpha", type=float)
    at.add_argument("--steps", type=int)
    at.add_argument("--restarts", type=int)
    at.add_argument("--k", type=int)
    at.add_argument("--objective", default="ifia_topk",
                    choices=["ifia_topk", "cross_entropy", "kl_to_natural", "igr_cosine", "ig_l1", "ce_ig_l1",
                             "ce_pcl"])
    at.set_defaults(fn=cmd_attack)
    sim = common(sub.add_parser("simulate", help="cosine vs Kendall tau simulation"))
    sim.add_argument("--dim", type=int)
    sim.add_argument("--n", type=int)
    sim.set_defaults(fn=cmd_simulate)
    co = common(sub.add_parser("consistency", help="activation consistency of a checkpoint"))
    co.add_argument("--checkpoint")
    co.add_argument("--model-id")
    co.set_defaults(fn=cmd_consistency)
    common(sub.add_parser("theorem", help="ordering, sequence search and Pearson checks")).set_defaults(fn=cmd_theorem)
    return p


def _thread_limit():
    value = os.environ.get("ATTRIROB_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"ATTRIROB_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
