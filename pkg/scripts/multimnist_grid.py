"""Run the MultiMNIST strategy grid and print final test error and relative epoch time.

    python3 scripts/multimnist_grid.py --out runs/grid --epochs 20
"""

import argparse
import os

from mtlopt.config import TrainConfig
from mtlopt.harness import compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--strategies", default="sgd,mgda-ub,bls,fbls,fbls-decay")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    os.environ["MTLOPT_THREADS"] = str(args.threads)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    cfg.optim.strategies = tuple(args.strategies.split(","))
    rows = compare(cfg, args.out)

    print(f"{'strategy':<12}{'lr':>10}{'test err':>10}{'epoch ms':>10}{'time %':>8}  status")
    for r in rows:
        lr = "" if r["lr"] is None else f"{r['lr']:.3g}"
        err = "nan" if r["final_test_error"] is None else f"{r['final_test_error']:.3f}"
        print(f"{r['strategy']:<12}{lr:>10}{err:>10}{r['mean_epoch_ms']:>10.0f}{r['relative_time_pct']:>8.0f}  {r['status']}")
    print(f"summary written to {args.out}/summary.csv")


if __name__ == "__main__":
    main()
