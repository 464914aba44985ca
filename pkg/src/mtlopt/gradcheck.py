"""Finite-difference verification of the reverse-mode gradients on random small models."""

from __future__ import annotations

import numpy as np

from . import model as mdl
from .tensor import Tensor, finite_diff


def rel_err(a, b, floor: float = 1e-3) -> float:
    """Max elementwise ``|a - b| / max(|a|, |b|, floor)``.

    The floor turns the check into an absolute one (``1e-5 * floor``) for
    entries that are essentially zero.
    """
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_problem(rng: np.random.Generator, max_width: int = 32, max_tasks: int = 3, n: int | None = None,
                   activation: str | None = None):
    """A random encoder/decoder MLP (widths <= ``max_width``) and a matching batch.

    The hidden activation is drawn from tanh/relu unless ``activation`` pins it.
    """
    T = int(rng.integers(1, max_tasks + 1))
    d_in = int(rng.integers(2, max_width + 1))
    enc = [int(w) for w in rng.integers(2, max_width + 1, size=rng.integers(1, 3))]
    dec = [int(w) for w in rng.integers(2, max_width + 1, size=rng.integers(0, 2))]
    act = str(rng.choice(["tanh", "relu"]))
    act = activation or act
    kinds = [str(k) for k in rng.choice(["softmax_xent", "mse"], size=T)]
    outs = [int(rng.integers(2, 6)) for _ in range(T)]
    model = mdl.build_model(d_in, enc, dec, outs, kinds, seed=int(rng.integers(2**31)), activation=act)
    n = n or int(rng.integers(1, 9))
    labels = [rng.integers(0, o, size=n) if k == "softmax_xent" else rng.normal(size=(n, o))
              for k, o in zip(kinds, outs)]
    return model, mdl.Batch(Tensor(rng.uniform(-1, 1, size=(n, d_in))), labels)


def _loss_fn(model, batch, t: int, block):
    """Task ``t`` loss as a function of one flat parameter block."""
    def f(x: Tensor) -> float:
        enc, decs = model.encoder, list(model.decoders)
        if block == "shared":
            enc = mdl.unflatten(model.encoder, x.data)
        else:
            decs[t] = mdl.unflatten(model.decoders[t], x.data)
        z = mdl.forward_latent(model, batch.inputs, enc)
        return mdl.task_losses_from_latent(model, z, batch, mdl.PassCounter(), decs)[t]
    return f


def check_model(model, batch, h: float = 1e-6) -> float:
    """Worst relative error of shared, task and latent gradients against central differences."""
    counter = mdl.PassCounter()
    shared, task = mdl.parameter_grads(model, batch, counter)
    latent = mdl.encode(model, batch, counter)
    zg, _ = mdl.latent_grads(model, latent, batch, counter)
    worst = 0.0
    for t in range(model.n_tasks):
        fd = finite_diff(_loss_fn(model, batch, t, "shared"), mdl.flatten(model.encoder), h)
        worst = max(worst, rel_err(shared.grads[t], fd.data))
        if model.decoders[t]:
            fd = finite_diff(_loss_fn(model, batch, t, "task"), mdl.flatten(model.decoders[t]), h)
            worst = max(worst, rel_err(task.grads[t], fd.data))

        def fz(z, t=t):
            return mdl.task_losses_from_latent(model, z, batch, mdl.PassCounter())[t]
        fd = finite_diff(fz, latent.z.data, h)
        worst = max(worst, rel_err(zg.grads[t], fd.data))
    return worst


def gradient_suite(seed: int = 0, n_models: int = 50) -> float:
    rng = np.random.default_rng(seed)
    return max(check_model(*random_problem(rng)) for _ in range(n_models))
