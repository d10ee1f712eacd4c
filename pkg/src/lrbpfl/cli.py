"""Command-line driver: ``lrbpfl run | selfcheck | compare``.

Exit codes: 0 success, 1 self-check failure, 2 invalid configuration or
arguments, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import selfcheck
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import atomic_write, run_experiment, write_outputs
from .runtime import MODES, NumericalError

log = logging.getLogger("lrbpfl")

OUTPUT_ENV = "LRBPFL_OUTPUT_DIR"

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config", "a config file is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    cfg.output_dir = args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    cfg.validate()
    return cfg


def _progress(mode: str):
    def on_round(record):
        if "eval" in record:
            ev = record["eval"]
            log.info(
                "%s round %d: loss %.4f acc %.4f a-ece %.4f",
                mode, record["round"], record["mean_train_loss"], ev["mean_accuracy"], ev["a_ece"],
            )
    return on_round


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg, on_round=_progress(cfg.mode))
    write_outputs(result, cfg, cfg.output_dir)
    print(json.dumps(result.report.summary(), sort_keys=True))
    print(f"outputs written to {cfg.output_dir}")
    return EXIT_OK


def _parse_modes(raw: list[str]) -> list[str]:
    modes = [m.strip() for chunk in raw for m in chunk.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes", "at least one mode is required")
    for m in modes:
        if m not in MODES:
            raise ConfigError("--modes", f"{m!r} is not one of {', '.join(MODES)}")
    return modes


def comparison_table(rows: list[dict]) -> str:
    header = ["mode", "accuracy", "a_ece", "w_ece", "worst_client"]
    cells = [header] + [
        [r["mode"], f"{r['accuracy']:.4f}", f"{r['a_ece']:.4f}", f"{r['w_ece']:.4f}", str(r["worst_client"])]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    modes = _parse_modes(args.modes)
    cfg = _load(args)
    rows = []
    for mode in modes:
        result = run_experiment(cfg, mode, on_round=_progress(mode))
        write_outputs(result, cfg, os.path.join(cfg.output_dir, mode))
        rep = result.report
        rows.append(
            {"mode": mode, "accuracy": rep.mean_accuracy, "a_ece": rep.a_ece, "w_ece": rep.w_ece,
             "worst_client": rep.worst_client}
        )
    table = comparison_table(rows)
    atomic_write(os.path.join(cfg.output_dir, "compare.json"), json.dumps({"seed": cfg.seed, "rows": rows}, indent=2) + "\n")
    atomic_write(os.path.join(cfg.output_dir, "compare.txt"), table)
    print(table, end="")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    kinds = list(selfcheck.CHECKS) if args.kind == "all" else [args.kind]
    seed = args.seed or 0
    ok = True
    for kind in kinds:
        res = selfcheck.CHECKS[kind](seed=seed)
        print(res.line())
        ok = ok and res.passed
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--mode", help=f"override the config mode ({', '.join(MODES)})")
    common.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else the config's output_dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="log evaluation progress")

    parser = argparse.ArgumentParser(prog="lrbpfl", description="Low-rank Bayesian personalized FL simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="train one mode and write reports")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", parents=[common], help="train several modes on identical data")
    p.add_argument("--modes", nargs="+", default=["lr_bpfl,fedavg"], help="modes, space or comma separated")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("selfcheck", parents=[common], help="run a numerical oracle")
    p.add_argument("kind", choices=[*selfcheck.CHECKS, "all"])
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must lie in [0, 2^64)", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure at round {exc.round_index}, client {exc.client_id}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
