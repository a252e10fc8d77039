"""Command-line driver: ``fedshare {run,sweep,oracle,emd}``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import FedShareError
from .experiment import SWEEP_KNOBS, oracle_csv, oracle_report, run_experiment, sweep, write_artifacts
from .io import atomic_write_text, dump_json

OUT_ENV = "FEDSHARE_OUT"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML or JSON experiment file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="N", help="override the master seed")
    common.add_argument("--out", metavar="DIR", help=f"output directory (overrides ${OUT_ENV} and the config)")
    common.add_argument("--method", choices=("daca", "scc", "cec", "central", "none"), help="override the method")

    p = argparse.ArgumentParser(prog="fedshare", description="Clustered data-sharing federated learning simulator.")
    sub = p.add_subparsers(dest="command", required=True, metavar="{run,sweep,oracle,emd}")
    sub.add_parser("run", parents=[common], help="run one experiment end to end")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one knob and write sweep.csv")
    sw.add_argument("--knob", required=True, choices=SWEEP_KNOBS)
    sw.add_argument("--values", required=True, help="comma-separated ascending values")
    sw.add_argument("--no-train", action="store_true", help="report EMD only, skip FL training")
    orc = sub.add_parser("oracle", parents=[common], help="compare heuristics with the exhaustive optimum (K <= 8)")
    orc.add_argument("--instances", type=int, default=5, metavar="N")
    sub.add_parser("emd", parents=[common], help="clustering and EMD report only, no training")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.method is not None:
        cfg = cfg.replace(method=args.method)
    out = args.out or os.environ.get(OUT_ENV) or cfg.out_dir
    return cfg.replace(out_dir=out)


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise FedShareError(f"bad --values: {exc}") from exc


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        out = Path(cfg.out_dir)
        if args.command == "run":
            res = run_experiment(cfg, out)
            sys.stdout.write(dump_json({**res.emd, **res.time.to_json(), "rounds_to_target": res.rounds_to_target}))
        elif args.command == "emd":
            res = run_experiment(cfg, None, train=False)
            write_artifacts(res, out, train=False)
            sys.stdout.write(dump_json(res.emd))
        elif args.command == "sweep":
            sweep(cfg, args.knob, _values(args.values), out, train=False if args.no_train else None)
            sys.stdout.write((out / "sweep.csv").read_text())
        elif args.command == "oracle":
            if args.instances < 1:
                raise FedShareError("--instances must be at least 1")
            text = oracle_csv(oracle_report(cfg, args.instances))
            atomic_write_text(out / "oracle.csv", text)
            sys.stdout.write(text)
    except (FedShareError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
