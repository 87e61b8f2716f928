"""Command-line entry point.

    ibtok train     --config cfg.yaml --out runs/a
    ibtok sweep     --config cfg.yaml --grid beta=0.1,1,10 --seeds 0,1,2 --out runs/b
    ibtok oracle    --suite {kl,mi,dpi,cka}
    ibtok gradcheck [--configs 5]

Exit codes: 0 success, 1 configuration error, 2 numerical abort,
3 oracle or gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .harness.config import ConfigError, TrainConfig, dump_config, load_config
from .harness.sweep import parse_grid, sweep
from .harness.train import (
    METRIC_COLUMNS,
    TrainingAbort,
    converged,
    run_training,
    write_metrics_csv,
    write_summary,
)
from .oracles import SUITES, gradcheck_total_loss, run_suite
from .toymodel import save_params

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3


def _config(path: str | None) -> TrainConfig:
    return load_config(path) if path else TrainConfig().validate()


def cmd_train(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(cfg)
    write_metrics_csv(result.records, out / "metrics.csv")
    final = converged(result.records, cfg.steps)
    write_summary(final, out / "summary.json", {"steps": cfg.steps, "seed": cfg.seed})
    save_params(result.params, out / "weights.txt")
    dump_config(cfg, out / "config.yaml")
    print(f"probe_accuracy={final.probe_accuracy:.4f} compact_bound_u={final.compact_bound_u:.4f} "
          f"cka_vis_text={final.cka_vis_text:.4f} -> {out}")
    return EXIT_OK


def _seeds(spec: str | None) -> list[int] | None:
    if not spec:
        return None
    try:
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {spec!r}") from exc


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    param, values = parse_grid(args.grid)
    result = sweep(cfg, param, values, _seeds(args.seeds), workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = [c for c in METRIC_COLUMNS if c != "step"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "seed", "failed", *cols])
        for e in result.entries:
            vals = [repr(getattr(e.record, c)) if e.record and getattr(e.record, c) is not None
                    else "nan" for c in cols]
            w.writerow([repr(e.value), e.seed, int(e.failed), *vals])
    summary = {"param": param, "values": values, "seeds": result.seeds,
               "failed": sum(e.failed for e in result.entries), "median": {}}
    for v in values:
        try:
            summary["median"][repr(v)] = {c: result.median(v, c) for c in cols}
        except ValueError:
            summary["median"][repr(v)] = None
    (out / "summary.json").write_text(json.dumps(summary) + "\n")
    for v in values:
        m = summary["median"][repr(v)]
        shown = "failed" if m is None else (
            f"compact_bound_u={m['compact_bound_u']:.4f} probe_accuracy={m['probe_accuracy']:.4f} "
            f"cka_vis_text={m['cka_vis_text']:.4f}")
        print(f"{param}={v}: {shown}")
    return EXIT_OK if result.complete else EXIT_NUMERIC


def cmd_oracle(args) -> int:
    checks = run_suite(args.suite, args.seed)
    for c in checks:
        print(c.line())
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ORACLE


def cmd_gradcheck(args) -> int:
    ok = True
    for i in range(args.configs):
        rep = gradcheck_total_loss(args.seed + i, args.eps, args.tolerance)
        ok &= rep.passed
        print(f"[{'PASS' if rep.passed else 'FAIL'}] config {i}: max relative error "
              f"{rep.max_rel_error:.3e} (input {rep.input_index}, coordinate {rep.coordinate})")
    return EXIT_OK if ok else EXIT_ORACLE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibtok", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write metrics")
    p.add_argument("--config", help="YAML config (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="sweep one hyperparameter over seeds")
    p.add_argument("--config")
    p.add_argument("--grid", required=True, help="e.g. beta=0.1,1,10")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="run an estimator self-check suite")
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--configs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
