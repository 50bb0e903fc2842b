"""Command-line front end.

Subcommands wrap the library stages: data synthesis, track-statistics
fitting, single-estimator training, metric evaluation on stored arrays,
full config-driven runs, the sweep family, and a gradient self-check.
Exit codes: 0 success, 1 experiment failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, natstats
from .estimators import (
    FlowConfig,
    PclConfig,
    VaeConfig,
    make_flow,
    make_pcl,
    make_vae,
    pcl_loss,
    slowflow_nll,
    slowvae_loss,
)
from .gradcore import grad_check
from .metrics import MetricInput, mcc, mig, modularity, sap
from .synthgen import pair_batch_to_csv

_GRADCHECK_TOL = 1e-4


def _load_config(path: str) -> harness.ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    return harness.config_from_dict(data)


def _read_matrix(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _out_dir(args) -> str:
    return args.out or os.environ.get(harness.OUT_DIR_ENV) or "results"


def _emit(payload: dict, fmt: str, csv_lines) -> None:
    if fmt == "json":
        print(json.dumps(payload, indent=1))
    else:
        for line in csv_lines:
            print(line)


def _cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    seed = args.seed if args.seed is not None else config.seeds[0]
    obs, factors = harness._build_dataset(config.dataset, seed)
    pairs_path = os.path.join(out, f"pairs-seed{seed}.csv")
    pair_batch_to_csv(obs, pairs_path)
    written = [pairs_path]
    if factors is not None:
        factors_path = os.path.join(out, f"factors-seed{seed}.csv")
        np.savetxt(factors_path, np.asarray(factors), delimiter=",")
        written.append(factors_path)
    for path in written:
        print(path)
    return 0


def _cmd_fit_stats(args) -> int:
    errors: list = []
    tracks = natstats.load_tracks(args.input, errors=errors)
    if errors:
        print(f"{len(errors)} rows rejected", file=sys.stderr)
    table = natstats.compute_transitions(tracks, max_frame_gap=args.gap)
    table = natstats.normalize_clip(table)
    report = natstats.stats_report(table)
    if args.format == "json":
        print(json.dumps(report, indent=1))
    else:
        print(natstats.stats_text(report))
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else config.seeds[0]
    single = harness.ExperimentConfig(
        seeds=[seed], dataset=config.dataset, estimator=config.estimator,
        metrics=config.metrics, sweep=config.sweep,
        out_dir=args.out or config.out_dir, save_checkpoints=True)
    record = harness.run(single)
    entry = record.per_seed[0]
    if entry["error"]:
        print(f"seed {seed} failed: {entry['error']}", file=sys.stderr)
        return 1
    payload = {"seed": seed, "train": entry["train"],
               "scores": entry["scores"], "artifacts": record.artifacts}
    lines = [f"seed {seed}: loss={entry['train']['final_loss']!r}"]
    lines += [f"{k}={v!r}" for k, v in (entry["scores"] or {}).items()]
    lines += record.artifacts
    _emit(payload, args.format, lines)
    return 0


def _cmd_eval(args) -> int:
    latents = _read_matrix(args.latents)
    factors = _read_matrix(args.factors)
    mi = MetricInput(latents, factors, ("continuous",) * factors.shape[1])
    scores = {}
    for name in args.metrics.split(","):
        name = name.strip()
        if name == "mcc":
            scores[name] = mcc(mi, correlation=args.correlation).score
        elif name == "mig":
            scores[name] = mig(mi)
        elif name == "modularity":
            scores[name] = modularity(mi)
        elif name == "sap":
            scores[name] = sap(mi)
        else:
            raise ValueError(f"unknown metric {name!r}")
    _emit(scores, args.format, [f"{k},{v!r}" for k, v in scores.items()])
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args.config)
    if args.out:
        config.out_dir = args.out
    record = harness.run(config)
    if args.format == "json":
        print(json.dumps(record.to_dict(), indent=1))
    else:
        for entry in record.per_seed:
            if entry["error"]:
                print(f"seed {entry['seed']}: FAILED ({entry['error']})")
            else:
                scores = " ".join(f"{k}={v!r}" for k, v in entry["scores"].items())
                print(f"seed {entry['seed']}: {scores}")
        for name, agg in record.aggregates.items():
            print(f"{name}: mean={agg['mean']!r} sd={agg['sd']!r} n={agg['n']}")
        for path in record.artifacts:
            print(path)
    if all(entry["error"] for entry in record.per_seed):
        print("all seeds failed", file=sys.stderr)
        return 1
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args.config) if args.config else harness.ExperimentConfig()
    seeds = list(range(2)) if args.smoke else config.seeds
    out = args.out or config.out_dir
    axes = config.sweep
    if args.which == "table4":
        payload = harness.sweep_table4(
            dims=args.dims, l_values=axes.l_values, seeds=seeds,
            steps=args.steps, count=args.count, out_dir=out)
    elif args.which == "kappa":
        payload = harness.sweep_kappa(
            kappas=axes.kappas, seeds=seeds, steps=args.steps,
            count=args.count, out_dir=out)
    elif args.which == "alpha":
        payload = harness.sweep_alpha_identifiability(
            alphas=axes.alphas, seeds=seeds, steps=args.steps,
            count=args.count, out_dir=out)
    else:
        lams = [args.lam] if args.lam is not None else axes.lams
        payload = harness.sweep_lap_histogram(
            lams=lams, count=args.count, seed=seeds[0], out_dir=out)
    if args.format == "json":
        print(json.dumps(payload, indent=1))
    else:
        for row in payload["rows"]:
            print(row)
    return 0


def _cmd_gradcheck(args) -> int:
    from .synthgen import SourceChainConfig, sample_pairs

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    batch = sample_pairs(SourceChainConfig(dim=3, alpha=1.0, lam=6.0,
                                           mode="pair", count=32), rng)
    checks = []
    flow = make_flow(FlowConfig("linear", 3, lam=6.0), rng)
    checks.append(("slowflow-linear",
                   lambda p: slowflow_nll(flow, batch, 6.0, params=p), flow))
    coupling = make_flow(FlowConfig("coupling", 3, n_blocks=2, hidden=8, lam=6.0), rng)
    checks.append(("slowflow-coupling",
                   lambda p: slowflow_nll(coupling, batch, 6.0, params=p), coupling))
    vae = make_vae(VaeConfig(3, 3, encoder="mlp", hidden=8), rng)
    checks.append(("slowvae",
                   lambda p: slowvae_loss(vae, batch, 10.0, 6.0,
                                          np.random.default_rng(7), params=p), vae))
    pcl = make_pcl(PclConfig(3, n_blocks=2, hidden=8), rng)
    checks.append(("pcl",
                   lambda p: pcl_loss(pcl, batch, np.random.default_rng(7), params=p),
                   pcl))
    failed = False
    for name, fn, model in checks:
        vals = {k: t.data for k, t in model.store.items()}
        err = grad_check(fn, vals)
        ok = err <= _GRADCHECK_TOL
        failed = failed or not ok
        print(f"{name}: max rel err {err:.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slowlab",
        description="Slow-feature identifiability experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None,
                        help=f"output directory (default ${harness.OUT_DIR_ENV} or ./results)")
    common.add_argument("--config", default=None, help="JSON config path")
    common.add_argument("--format", choices=("json", "csv"), default="csv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="synthesize pair data to CSV files")
    p.set_defaults(func=_cmd_gen_data, needs_config=True)

    p = sub.add_parser("fit-stats", parents=[common],
                       help="fit transition statistics from a track CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--gap", type=int, default=1)
    p.set_defaults(func=_cmd_fit_stats)

    p = sub.add_parser("train", parents=[common],
                       help="train one estimator seed and save a checkpoint")
    p.set_defaults(func=_cmd_train, needs_config=True)

    p = sub.add_parser("eval", parents=[common],
                       help="score stored latents against stored factors")
    p.add_argument("--latents", required=True)
    p.add_argument("--factors", required=True)
    p.add_argument("--metrics", default="mcc", help="comma-separated names")
    p.add_argument("--correlation", choices=("spearman", "pearson"),
                   default="spearman")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("run", parents=[common],
                       help="full multi-seed experiment from a config")
    p.set_defaults(func=_cmd_run, needs_config=True)

    p = sub.add_parser("sweep", parents=[common], help="axis sweeps")
    p.add_argument("which", choices=("table4", "kappa", "alpha", "lap-histogram"))
    p.add_argument("--smoke", action="store_true", help="2 seeds instead of 10")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--count", type=int, default=20_000)
    p.add_argument("--dims", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference self-test of every loss")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "needs_config", False) and not args.config:
        print(f"error: {args.command} requires --config", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
