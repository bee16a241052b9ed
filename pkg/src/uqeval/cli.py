"""Command line entry point: ``uqeval {synth,train,evaluate,compare}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as exp
from ._io import atomic_write
from .data import SyntheticSpec, generate_synthetic, write_csv
from .errors import ConfigError, UQEvalError

logger = logging.getLogger("uqeval")


def _config(args):
    if args.config is None:
        raise ConfigError("--config is required")
    config = exp.RunConfig.load(args.config)
    out = str(Path(args.out).resolve()) if args.out else None
    return config.with_overrides(out_dir=out, seed=args.seed, split_strategy=args.split)


def cmd_synth(args):
    spec = SyntheticSpec(
        n=args.n,
        d=args.d,
        mean_fn=args.mean_fn,
        noise_fn=args.noise_fn,
        noise_base=args.noise_base,
        noise_slope=args.noise_slope,
        groups=args.groups,
        n_groups=args.n_groups,
        seed=args.seed if args.seed is not None else 0,
    )
    dataset, sigma = generate_synthetic(spec)
    out = Path(args.out or ".")
    write_csv(dataset, out / "synthetic.csv")
    atomic_write(out / "true_sigma.csv", "true_sigma\n" + "".join(f"{float(s)!r}\n" for s in sigma))
    logger.info("wrote %d rows to %s", len(dataset), out / "synthetic.csv")


def cmd_train(args):
    config = _config(args)
    path, digest = exp.cmd_train(config)
    print(f"manifest: {path}\nsha256: {digest}")


def cmd_evaluate(args):
    config = _config(args)
    selectors = tuple(exp.SHORT_KINDS[u] for u in args.uncertainty) if args.uncertainty else exp.KINDS
    summary = exp.cmd_evaluate(config, selectors)
    print(summary.to_text(), end="")


def cmd_compare(args):
    in_summary = exp.MetricsSummary.load(args.in_summary)
    out_summary = exp.MetricsSummary.load(args.out_summary)
    report = exp.cmd_compare(in_summary, out_summary, args.out)
    print(exp.compare_text(report), end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="uqeval", description="Uncertainty quantification toolkit for neural regression")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic heteroscedastic dataset")
    synth.add_argument("--out", help="output directory")
    synth.add_argument("--seed", type=int)
    synth.add_argument("--n", type=int, default=5000)
    synth.add_argument("--d", type=int, default=2)
    synth.add_argument("--mean-fn", default="sines", choices=["sines", "polynomial"])
    synth.add_argument("--noise-fn", default="affine", choices=["constant", "affine"])
    synth.add_argument("--noise-base", type=float, default=0.05)
    synth.add_argument("--noise-slope", type=float, default=0.5)
    synth.add_argument("--groups", default="none", choices=["none", "clusters"])
    synth.add_argument("--n-groups", type=int, default=20)
    synth.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("train", cmd_train, "split the data and train the configured method"),
        ("evaluate", cmd_evaluate, "score a trained run on its test split"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int)
        p.add_argument("--split", choices=["random", "group"])
        if name == "evaluate":
            p.add_argument("--uncertainty", action="append", choices=["ale", "epi", "total"],
                           help="kinds to export curves for (repeatable; default all)")
        p.set_defaults(func=func)

    compare = sub.add_parser("compare", help="out-of-domain / in-domain ratios of two summaries")
    compare.add_argument("in_summary")
    compare.add_argument("out_summary")
    compare.add_argument("--out", help="write the comparison report (JSON) here")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UQEvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
