"""Command line interface.

Exit codes: 0 success, 1 usage or input error, 2 a verification check
failed, 3 training diverged or the state is not collapsed.
"""

import argparse
import logging
import sys

from ..theory import NotCollapsedError
from ..training import TrainingDiverged
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .runner import run_analyze, run_report, run_train, run_verify

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_NOT_COLLAPSED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="deepufm", description="Train and analyse deep unconstrained feature models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.add_argument("--seed", type=int)

    a = sub.add_parser("analyze", help="write spectra and alignment CSVs for a checkpoint")
    a.add_argument("checkpoint")
    a.add_argument("--config", help="config file (defaults to the one stored in the checkpoint)")
    a.add_argument("--output-dir")

    v = sub.add_parser("verify", help="check a collapsed checkpoint against the closed-form predictions")
    v.add_argument("checkpoint")
    v.add_argument("--config")
    v.add_argument("--output-dir")
    v.add_argument("--tol-scale", type=float, default=1.0, help="multiply every tolerance by this factor")

    r = sub.add_parser("report", help="summarise the CSVs of a run directory")
    r.add_argument("directory")
    return p


def _load(args):
    config = load_config(args.config) if getattr(args, "config", None) else None
    if config is not None:
        if getattr(args, "seed", None) is not None:
            config = config.with_seed(args.seed)
        if args.output_dir:
            config = config.with_output_dir(args.output_dir)
    return config


def _train(args):
    config = _load(args)
    state, tlog, final = run_train(config)
    last = tlog.last()
    print(f"epoch {tlog.final_epoch} loss {last.loss:.10g} grad_norm {last.grad_norm:.3e} converged {tlog.converged}")
    for l, m in last.dnc1.items():
        print(f"layer {l}: collapse metric {m.value:.3e}{' (degenerate)' if m.degenerate else ''}")
    print(f"checkpoint: {final}")
    if not tlog.collapsed:
        print("final state is not collapsed at the probe layers", file=sys.stderr)
        return EXIT_NOT_COLLAPSED
    return EXIT_OK


def _analyze(args):
    config = _load(args)
    for path in run_analyze(args.checkpoint, config, args.output_dir):
        print(path)
    return EXIT_OK


def _verify(args):
    config = _load(args)
    report = run_verify(args.checkpoint, config, args.tol_scale, args.output_dir)
    for c in report["checks"]:
        where = f"layer {c['layer']}" if c["layer"] else "all layers"
        print(f"{c['status'].upper():4s} {c['name']} ({where}) measured={c['measured']} tol={c['tolerance']}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def _report(args):
    for row in run_report(args.directory):
        print("  ".join(str(x) for x in row))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"train": _train, "analyze": _analyze, "verify": _verify, "report": _report}[args.command]
    try:
        return handler(args)
    except (TrainingDiverged, NotCollapsedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_COLLAPSED
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
