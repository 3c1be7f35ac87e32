"""Command-line front end: ``dnkd <subcommand> [options]``.

Failures print one line to stderr::

    error code=<family> exit=<n> msg=<text>

and exit with the family's status (see ``EXIT_CODES``).
"""

import argparse
import logging
from pathlib import Path
import sys

from . import config as config_mod
from . import pipeline as pl
from . import verify as verify_mod
from .distill import MODES
from .errors import (
    ChecksumError,
    ConfigError,
    DnkdError,
    FormatError,
    InvalidArgument,
    MissingInput,
    TrainingDiverged,
)

log = logging.getLogger("dnkd")

# Most specific family first.
EXIT_CODES = (
    (MissingInput, 3),
    (ConfigError, 4),
    (ChecksumError, 5),
    (FormatError, 6),
    (InvalidArgument, 7),
    (TrainingDiverged, 8),
    (DnkdError, 1),
)
VERIFY_FAILED = 9


def exit_code(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _float_list(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file (key = value lines in sections)")
    common.add_argument("--run-dir", type=Path, help="artifact directory (default runs/<name>)")
    common.add_argument("--seed", type=int, help="replace the configured seed list with this one seed")
    common.add_argument("--mode", choices=MODES, default="dnkd")
    common.add_argument("--k", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--self-exclude", choices=("on", "off"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dnkd", description="kNN-teacher distillation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("gen-corpus", "write the synthetic train/dev/test corpus"),
        ("train-baseline", "train the label-smoothed CE baseline for every seed"),
        ("build-store", "extract decoder context vectors into the datastore"),
        ("build-cache", "precompute k nearest neighbors for every training position"),
        ("train-student", "train students with --mode ce|nkd|dnkd"),
        ("evaluate", "score every checkpoint on the test split"),
        ("verify", "run the built-in property suites"),
    ):
        sub.add_parser(name, parents=[common], help=text)
    sw = sub.add_parser("sweep", parents=[common], help="vary one of k, beta, tau")
    sw.add_argument("--axis", choices=("k", "beta", "tau"), required=True)
    sw.add_argument("--values", type=_float_list, required=True)
    gr = sub.add_parser("grad-report", parents=[common], help="per-token gradient norms, NKD vs DNKD")
    gr.add_argument("--checkpoint", type=Path)
    gr.add_argument("--sentences", type=int, default=64)
    return parser


def resolve_config(args):
    if args.config is not None:
        cfg = config_mod.load(args.config)
    elif args.run_dir is not None and (args.run_dir / "config").exists():
        cfg = config_mod.load(args.run_dir / "config")
    else:
        cfg = config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    loss = {k: v for k, v in (("tau", args.tau), ("beta", args.beta), ("lam", args.lam)) if v is not None}
    try:
        if loss:
            cfg = cfg.with_loss(**loss)
        if args.k is not None:
            if args.k < 1:
                raise InvalidArgument(f"k must be >= 1, got {args.k}")
            cfg = cfg.with_retrieval(k=args.k)
    except DnkdError as exc:
        raise ConfigError(f"invalid override: {exc}") from None
    if args.self_exclude is not None:
        cfg = cfg.with_retrieval(self_exclude=args.self_exclude == "on")
    return cfg


def run(args):
    if args.command == "verify":
        results = verify_mod.run_all()
        for r in results:
            print(r.line())
        return 0 if verify_mod.all_passed(results) else VERIFY_FAILED

    cfg = resolve_config(args)
    paths = pl.RunPaths(args.run_dir or Path("runs") / cfg.name).ensure()
    resolved = config_mod.dump(cfg)
    log.info("resolved config:\n%s", resolved)
    (paths.reports / f"{args.command}.config").write_text(resolved)

    if args.command == "gen-corpus":
        paths.config.write_text(resolved)
        corpus = pl.gen_corpus(cfg, paths)
        print(f"train={len(corpus.train)} dev={len(corpus.dev)} test={len(corpus.test)}")
    elif args.command == "train-baseline":
        _print_reports("baseline", pl.run_baseline(cfg, paths))
    elif args.command == "build-store":
        store = pl.run_build_store(cfg, paths)
        print(f"entries={len(store)} crc32={store.checksum():08x} path={paths.datastore}")
    elif args.command == "build-cache":
        cache = pl.run_build_cache(cfg, paths)
        print(f"positions={len(cache)} k={cache.k} path={paths.neighbors}")
    elif args.command == "train-student":
        _print_reports(args.mode, pl.run_student(cfg, paths, args.mode))
    elif args.command == "evaluate":
        pl.run_evaluate(cfg, paths)
        print((paths.reports / "summary.txt").read_text(), end="")
    elif args.command == "sweep":
        _, summary = pl.sweep(cfg, paths, args.axis, args.values, mode=args.mode)
        print((paths.reports / f"sweep_{args.axis}.txt").read_text(), end="")
    elif args.command == "grad-report":
        rows = pl.run_gradient_report(cfg, paths, args.checkpoint, args.sentences)
        print(f"rows={len(rows)} path={paths.reports / 'grad_norms.csv'}")
    return 0


def _print_reports(role, reports):
    for seed, rep in reports.items():
        print(f"{role} seed={seed} bleu={rep.bleu:.2f} token_acc={rep.token_accuracy:.4f} exact={rep.exact_match:.4f}")
    print(f"{role} median_bleu={pl.median([r.bleu for r in reports.values()]):.2f}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return run(args)
    except DnkdError as exc:
        code = exit_code(exc)
        msg = " ".join(str(exc).split())
        print(f"error code={exc.code} exit={code} msg={msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
