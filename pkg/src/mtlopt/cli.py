"""Command-line entry point: ``mtlopt {train,compare,minnorm,check-grad,make-data}``.

Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dt
from .config import load_config
from .direction import min_norm_fw
from .errors import FormatError, MtlOptError, NumericError
from .gradcheck import gradient_suite
from .harness import compare, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtlopt", description="Multi-task line-search optimizers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="directory for metrics.csv")

    c = sub.add_parser("compare", help="run a strategy / learning-rate grid")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)

    m = sub.add_parser("minnorm", help="min-norm point of the convex hull of CSV row vectors")
    m.add_argument("--vectors", required=True, help="CSV file, one gradient per row")

    g = sub.add_parser("check-grad", help="finite-difference check of reverse-mode gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--models", type=int, default=50)
    g.add_argument("--tol", type=float, default=1e-5)

    d = sub.add_parser("make-data", help="materialise datasets")
    d.add_argument("kind", choices=["digits", "multimnist", "synth"])
    d.add_argument("--out", required=True, help="directory (digits) or CSV stem")
    d.add_argument("--source", default="digits", help="MNIST IDX directory or 'digits'")
    d.add_argument("--n-train", type=int, default=4096)
    d.add_argument("--n-test", type=int, default=1024)
    d.add_argument("--shift", type=int, default=4)
    d.add_argument("--d-in", type=int, default=16)
    d.add_argument("--d-z", type=int, default=4)
    d.add_argument("--tasks", type=int, default=2)
    d.add_argument("--noise", type=float, default=0.0)
    d.add_argument("--seed", type=int, default=0)
    return p


def _read_vectors(path) -> list[np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    try:
        return [np.array([float(v) for v in r]) for r in rows]
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def _make_data(args) -> None:
    out = Path(args.out)
    if args.kind == "digits":
        for split, (img, lab) in dt.write_digits_idx(out, seed=args.seed).items():
            print(f"{split}: {img} {lab}")
        return
    if args.kind == "multimnist":
        from .harness import _digits_split

        rng = np.random.default_rng(args.seed)
        if args.source == "digits":
            pools = {s: (im / 255.0, lab) for s, (im, lab) in _digits_split().items()}
        else:
            pools = {s: dt.load_source(args.source, s) for s in ("train", "test")}
        train_ds = dt.make_multimnist(*pools["train"], rng, args.n_train, args.shift, "train")
        test_ds = dt.make_multimnist(*pools["test"], rng, args.n_test, args.shift, "test")
    else:
        train_ds, test_ds = dt.synth_tasks(args.d_in, args.d_z, args.tasks, args.n_train, args.n_test,
                                           args.noise, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    for ds in (train_ds, test_ds):
        path = out.with_name(f"{out.name}_{ds.split}.csv")
        dt.write_dataset_csv(ds, path)
        print(path)


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.out:
                cfg.out = args.out
            mlog = train(cfg)
            final = mlog.final_test()
            print(f"steps={len(mlog)} final_test_loss={final[0]} final_test_error={final[1]}")
        elif args.command == "compare":
            rows = compare(load_config(args.config), args.out)
            for r in rows:
                lr = "" if r["lr"] is None else f" lr={r['lr']:.4g}"
                print(f"{r['strategy']}{lr}: test_error={r['final_test_error']} "
                      f"epoch_ms={r['mean_epoch_ms']:.1f} ({r['relative_time_pct']:.0f}%) {r['status']}")
        elif args.command == "minnorm":
            d = min_norm_fw(_read_vectors(args.vectors))
            print("alpha=(" + ", ".join(f"{a:.6g}" for a in d.weights) + ")")
            print(f"norm={np.sqrt(d.sqnorm):.5f}")
        elif args.command == "check-grad":
            err = gradient_suite(args.seed, args.models)
            print(f"max_rel_err={err:.3e} over {args.models} models")
            if not err <= args.tol:
                return 2
        else:
            _make_data(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except (MtlOptError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
