"""Command-line entry point: ``hetsim run | compare | memfit``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, config_from_dict, load_config
from .errors import ConfigError, HetsimError
from .memory import MemoryProfile, fit_batch_memory, max_safe_batch
from .metrics import compare_runs, read_run
from .runner import run_experiment

POLICY_ALIASES = {"dynamic+deadband": "deadband"}


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else config_from_dict({"seed": args.seed or 0})
    policy = POLICY_ALIASES.get(args.policy, args.policy)
    cfg = apply_overrides(cfg, mode=args.mode, policy=policy, preset=args.preset, seed=args.seed,
                          epochs=args.epochs, threads=args.threads, output_dir=args.out)
    out = Path(cfg.output_dir)
    metrics = run_experiment(cfg, out)
    s = metrics.summary
    tta = "never" if s["tta"] is None else f"{s['tta']:.3f}"
    print(f"mode={cfg.mode} policy={cfg.policy} epochs={s['epochs_run']} "
          f"sim_time={s['sim_time']:.3f} final_eval_acc={s['final_eval_acc']:.4f} "
          f"tta={tta} batches={s['final_batches']}")
    print(f"wrote {out}")
    return 0


def _cmd_compare(args) -> int:
    report = compare_runs(read_run(args.baseline), read_run(args.treatment))
    w = csv.writer(sys.stdout, delimiter=args.delimiter, lineterminator="\n")
    w.writerows(report.rows())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh, delimiter=args.delimiter, lineterminator="\n").writerows(report.rows())
    return 1 if (args.fail_on_regression and report.regressions) else 0


def _read_samples(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    try:
        return [(float(r[0]), float(r[1])) for r in rows]
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"{path}: expected batch_size,bytes rows ({exc})") from None


def _cmd_memfit(args) -> int:
    fit = fit_batch_memory(_read_samples(args.csv))
    print(f"slope={fit.slope!r}")
    print(f"intercept={fit.intercept!r}")
    print(f"r_squared={fit.r_squared!r}")
    if args.budget is not None:
        fixed = args.fixed or 0.0
        profile = MemoryProfile(fixed / 2, fixed / 2, 0.0, args.act_per_sample,
                                max(fit.slope, 0.0), max(fit.intercept, 0.0))
        print(f"b_max={max_safe_batch(profile, args.budget, hard_cap=args.hard_cap)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="YAML/JSON experiment config")
    r.add_argument("--mode", choices=["bsp", "asp"])
    r.add_argument("--policy", choices=["uniform", "variable", "dynamic", "deadband", "dynamic+deadband"])
    r.add_argument("--preset", help="preset name, e.g. HL8-bsp")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("baseline")
    c.add_argument("treatment")
    c.add_argument("--delimiter", default=",")
    c.add_argument("--out", help="also write the report here")
    c.add_argument("--fail-on-regression", action="store_true")
    c.set_defaults(func=_cmd_compare)

    m = sub.add_parser("memfit", help="fit batch memory from a batch_size,bytes CSV")
    m.add_argument("csv")
    m.add_argument("--budget", type=float, help="per-worker memory budget in bytes")
    m.add_argument("--fixed", type=float, default=0.0, help="model + gradient + optimizer bytes")
    m.add_argument("--act-per-sample", type=float, default=0.0, help="activation bytes per sample")
    m.add_argument("--hard-cap", type=int, default=1 << 20)
    m.set_defaults(func=_cmd_memfit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HetsimError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
