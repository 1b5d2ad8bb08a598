"""Command-line entry point.

Subcommands:
    validate   check a config file, report field-level errors
    run        execute an experiment grid and write the result bundle
    aggregate  rebuild comparison tables/plots from an existing bundle
    toy        one-shot synthetic benchmark pipeline (bottleneck on/off)
    gradcheck  run the full gradient-verification suite
    report     re-emit SVG plots from an existing bundle

Exit codes: 0 success, 1 check failure, 2 config error, 3 partial run
failures, 4 all runs failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiment import (
    ConfigError,
    ResultBundle,
    aggregate,
    emit_plots,
    load_bundle,
    parse_config,
    run_experiment,
)
from .gradcheck import TOLERANCE, run_suite

TOY_CONFIG = """\
# One-shot synthetic benchmark: bottleneck (cfa) vs no-bottleneck
# (middle-additive) vs unimodal, full learning-rate sweep, {seeds} seeds.
seed = {seed}
out_dir = "{out_dir}"

[[datasets]]
name = "toy"
frequency = "toy"

[backbone]
kind = "mlp"
hidden_dim = 32
encoder_layers = 2

[windows]
lookback = 8
horizons = [8]

[training]
seeds = {seed_list}
sweep = {sweep}

[[fusion]]
strategy = "none"

[[fusion]]
strategy = "additive"
positions = ["middle"]

[[fusion]]
strategy = "cfa"
reduction = 8

[analyses]
run = ["similarity", "effective_rank", "attribution", "contribution_ratio", "efficiency", "irrelevant_text"]

[toy]
n = 1000
text_dim = 32
"""


def _echo(message: str) -> None:
    print(message, flush=True)


def cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error at {exc.field}: {exc}", file=sys.stderr)
        return 2
    print(
        f"ok: {len(cfg.datasets)} dataset(s), {len(cfg.fusions)} fusion spec(s), "
        f"{len(cfg.seeds)} seed(s), sweep={'on' if cfg.sweep else 'off'}"
    )
    return 0


def _finish(bundle: ResultBundle) -> int:
    if bundle.total_jobs and bundle.failed_jobs == bundle.total_jobs:
        print("all runs failed", file=sys.stderr)
        return 4
    if bundle.failed_jobs:
        print(f"{bundle.failed_jobs}/{bundle.total_jobs} runs failed", file=sys.stderr)
        return 3
    return 0


def cmd_run(args) -> int:
    try:
        bundle = run_experiment(
            args.config,
            out_dir=args.out,
            workers=args.workers,
            seed_override=args.seed,
            no_sweep=args.no_sweep,
            echo=_echo,
        )
    except ConfigError as exc:
        print(f"config error at {exc.field}: {exc}", file=sys.stderr)
        return 2
    print(f"bundle written to {bundle.out_dir}")
    return _finish(bundle)


def cmd_aggregate(args) -> int:
    aggregate(args.bundle, echo=_echo)
    return 0


def cmd_report(args) -> int:
    emit_plots(args.bundle)
    print(f"plots written under {Path(args.bundle) / 'plots'}")
    return 0


def cmd_toy(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    config_text = TOY_CONFIG.format(
        seed=args.seed,
        out_dir=str(out_dir).replace("\\", "/"),
        seeds=len(seeds),
        seed_list=json.dumps(seeds),
        sweep="false" if args.no_sweep else "true",
    )
    config_path = out_dir / "toy_config.toml"
    config_path.write_text(config_text)
    bundle = run_experiment(config_path, out_dir=out_dir, workers=args.workers, echo=_echo)
    _print_toy_summary(bundle)
    return _finish(bundle)


def _print_toy_summary(bundle: ResultBundle) -> None:
    per_type = {}
    ratios = {"matching": [], "contradicting": []}
    stats = []
    for setting, entry in bundle.diagnostics.items():
        for seed, cell in entry.get("seeds", {}).items():
            for label, diag in cell.items():
                for text_type, value in diag.get("per_label_mse", {}).items():
                    per_type.setdefault(label, {}).setdefault(text_type, []).append(value)
                contribution = diag.get("contribution")
                if contribution:
                    stats.append(contribution)
                for group, values in diag.get("contribution_samples", {}).items():
                    if group in ratios:
                        ratios[group].extend(values)
    if not per_type:
        return
    print("\nPer-type test MSE (mean over seeds):")
    print(f"{'text type':<14}{'additive-middle':>17}{'cfa':>10}{'improv %':>10}")
    for text_type in ("matching", "contradicting", "irrelevant"):
        add = per_type.get("additive-middle", {}).get(text_type)
        cfa = per_type.get("cfa", {}).get(text_type)
        if add and cfa:
            add_m, cfa_m = float(np.mean(add)), float(np.mean(cfa))
            improv = 100.0 * (add_m - cfa_m) / add_m
            print(f"{text_type:<14}{add_m:>17.4f}{cfa_m:>10.4f}{improv:>+10.2f}")
    if ratios["matching"] and ratios["contradicting"]:
        from .analysis import cohens_d, welch_t

        m, c = ratios["matching"], ratios["contradicting"]
        print("\nText-contribution ratio at the first adapter (pooled over seeds):")
        print(f"  matching      mean {np.mean(m):.4f}  (n={len(m)})")
        print(f"  contradicting mean {np.mean(c):.4f}  (n={len(c)})")
        print(f"  Welch t = {welch_t(m, c):.3f}, Cohen's d = {cohens_d(m, c):.3f}")


def cmd_gradcheck(args) -> int:
    results, elapsed = run_suite()
    width = max(len(name) for name in results)
    ok = True
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        ok = ok and err < TOLERANCE
        print(f"{name:<{width}}  max rel err {err:.3e}  {status}")
    print(f"total {elapsed:.1f}s over 10 seeds per case (tolerance {TOLERANCE})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fuselab",
        description="Multimodal time-series forecasting lab: naive vs. constrained text fusion",
    )
    parser.add_argument("--version", action="version", version=f"fuselab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--no-sweep", action="store_true", help="single run at multiplier 1.0")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("aggregate", help="rebuild tables and plots from a bundle")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("toy", help="one-shot synthetic bottleneck experiment")
    p.add_argument("--out", default="results/toy")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (5 gives a stable average)")
    p.add_argument("--seed", type=int, default=0, help="global seed offset")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-sweep", action="store_true")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="re-emit SVG plots from a bundle")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
