"""Epoch time and encoder pass counts as the encoder grows relative to the decoders.

For each encoder width the script trains sgd, mgda-ub, bls and fbls for a few
epochs and prints mean epoch time relative to sgd plus encoder passes per step.
"""

import argparse

import numpy as np

from mtlopt.config import TrainConfig
from mtlopt.harness import build_problem, train


def run(width: int, epochs: int, name: str, lr: float):
    cfg = TrainConfig(epochs=epochs)
    cfg.model.encoder = (width, 64)
    cfg.optim.optimizer, cfg.optim.lr = name, lr
    mlog = train(cfg)
    r = mlog.records
    return (mlog.mean_epoch_ms(), np.mean([x.enc_fwd for x in r]), np.mean([x.enc_bwd for x in r]),
            np.mean([x.trials for x in r]))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", default="32,128,512")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--lr", type=float, default=0.05)
    args = ap.parse_args()

    for width in map(int, args.widths.split(",")):
        cfg = TrainConfig()
        cfg.model.encoder = (width, 64)
        m = build_problem(cfg).model
        ratio = m.shared_size / sum(m.task_size(t) for t in range(m.n_tasks))
        print(f"\nencoder 1024-{width}-64, encoder/decoder parameters {ratio:.0f}x")
        base = None
        for name in ("sgd", "mgda-ub", "bls", "fbls"):
            ms, fwd, bwd, trials = run(width, args.epochs, name, args.lr)
            base = base or ms
            print(f"  {name:<8} {ms:8.0f} ms/epoch {100 * ms / base:6.0f}%   "
                  f"enc fwd/bwd per step {fwd:.2f}/{bwd:.2f}   trials {trials:.2f}")


if __name__ == "__main__":
    main()
