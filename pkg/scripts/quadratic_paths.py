"""FBLS and BLS iterates on quadratic toys whose Pareto set is the hull of the centres.

Writes one CSV per optimizer with the iterate, the min-norm residual and the
distance to the hull after every step.
"""

import argparse
import csv
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from mtlopt import model as mdl
from mtlopt.config import TrainConfig
from mtlopt.data import quadratic_problem
from mtlopt.direction import min_norm_residual
from mtlopt.harness import build_problem, train


def hull_distance(theta, centers):
    C = np.asarray(centers)
    res = minimize(lambda a: np.sum((theta - a @ C) ** 2), np.full(len(C), 1 / len(C)),
                   bounds=[(0, 1)] * len(C), constraints={"type": "eq", "fun": lambda a: a.sum() - 1})
    return float(np.sqrt(max(res.fun, 0.0)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=5)
    ap.add_argument("--tasks", type=int, default=3)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--start", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/quadratic")
    args = ap.parse_args()

    centers = np.random.default_rng(args.seed).normal(size=(args.tasks, args.dim))
    toy = quadratic_problem(centers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("fbls", "bls"):
        cfg = TrainConfig(epochs=args.steps, batch_size=1, seed=args.seed)
        cfg.data.dataset = "quadratic"
        cfg.data.centers = tuple(map(tuple, centers.tolist()))
        cfg.data.theta0 = (args.start,) * args.dim
        cfg.optim.optimizer = name
        rows = []

        def hook(before, after, batch, res, _):
            theta = mdl.flatten(after.encoder)
            rows.append([len(rows) + 1, res.eta_accepted, res.trials,
                         min_norm_residual(toy.grads(theta)), hull_distance(theta, centers), *theta])

        train(cfg, on_step=hook, problem=build_problem(cfg))
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "eta", "trials", "residual", "hull_distance"] + [f"theta{i}" for i in range(args.dim)])
            w.writerows(rows)
        last = rows[-1]
        print(f"{name}: {len(rows)} steps, final residual {last[3]:.2e}, hull distance {last[4]:.2e}")


if __name__ == "__main__":
    main()
