"""Armijo backtracking for multi-task models, in parameter space and in latent space.

``bls_step`` shrinks a trial step on the full parameter vector and pays one
encoder forward per trial.  ``fbls_step`` freezes the encoder: trials move the
saved latent batch along ``-d_z`` and only re-run the decoders, then the
accepted step is pulled back to the shared parameters with a single
vector-Jacobian product.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as mdl
from .direction import LATENT, min_norm_fw
from .errors import ConfigError
from .model import Batch, MultiTaskModel, PassCounter


class Variant(str, enum.Enum):
    BOTH = "Both"
    TASK_NORM_ONLY = "TaskNormOnly"
    DIRECTION_ONLY = "DirectionOnly"
    CLASSICAL_BOTH = "ClassicalBoth"


LATENT_VARIANTS = (Variant.BOTH, Variant.TASK_NORM_ONLY, Variant.DIRECTION_ONLY)


@dataclass(frozen=True)
class LineSearchConfig:
    beta: float = 0.1
    gamma: float = 0.5
    lr_ub: float = 1.0
    eps_floor: float = 1e-10
    variant: Variant = Variant.BOTH
    decay_rate: float | None = None
    decay_period: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.eps_floor < self.lr_ub:
            raise ConfigError(f"need 0 < eps_floor < lr_ub, got {self.eps_floor}, {self.lr_ub}")
        if (self.decay_rate is None) != (self.decay_period is None):
            raise ConfigError("decay_rate and decay_period must be given together")
        if self.decay_rate is not None:
            if not 0.0 < self.decay_rate < 1.0:
                raise ConfigError(f"decay_rate must lie in (0, 1), got {self.decay_rate}")
            if self.decay_period < 1:
                raise ConfigError(f"decay_period must be >= 1, got {self.decay_period}")


@dataclass
class StepResult:
    eta_accepted: float
    trials: int
    floor_hit: bool
    losses_before: list[float]
    losses_after: list[float]  # losses at the accepted trial point
    passes: PassCounter = field(default_factory=PassCounter)
    thresholds: list[float] = field(default_factory=list)
    task_grad_sqnorms: list[float] = field(default_factory=list)
    dir_dots: list[float] = field(default_factory=list)


def armijo_rhs(variant, losses: Sequence[float], task_grad_sqnorms: Sequence[float],
               dir_dots: Sequence[float], eta: float, beta: float) -> list[float]:
    """Right-hand side of the Armijo inequality, one threshold per task."""
    if eta < 0:
        raise ConfigError(f"eta must be non-negative, got {eta}")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    variant = Variant(variant)
    use_norm = variant is not Variant.DIRECTION_ONLY
    use_dir = variant is not Variant.TASK_NORM_ONLY
    out = []
    for loss, sq, dot in zip(losses, task_grad_sqnorms, dir_dots):
        margin = 0.0
        if use_norm:
            margin += eta * beta * sq
        if use_dir:
            margin += eta * beta * dot
        out.append(loss - margin)
    return out


def armijo_holds(losses_after: Sequence[float], thresholds: Sequence[float]) -> bool:
    return all(a <= b for a, b in zip(losses_after, thresholds))


def _search(cfg: LineSearchConfig, evaluate, losses, sqnorms, dots):
    """Backtracking loop.  ``evaluate(eta)`` returns trial losses.

    Trial k evaluates ``lr_ub * gamma**(k-1)``; once that drops below the
    floor, a final trial at ``eps_floor`` is taken and flagged.
    """
    trials = 0
    while True:
        eta = cfg.lr_ub * cfg.gamma ** trials
        floor = eta < cfg.eps_floor
        if floor:
            eta = cfg.eps_floor
        trials += 1
        after = evaluate(eta)
        rhs = armijo_rhs(cfg.variant, losses, sqnorms, dots, eta, cfg.beta)
        if floor or armijo_holds(after, rhs):
            return eta, trials, floor, after, rhs


def bls_step(model: MultiTaskModel, batch: Batch, cfg: LineSearchConfig, counter: PassCounter) -> StepResult:
    """One classical backtracking step over shared and task parameters."""
    if cfg.variant is not Variant.CLASSICAL_BOTH:
        raise ConfigError(f"bls_step needs variant ClassicalBoth, got {cfg.variant.value}")
    before = counter.snapshot()
    shared, task = mdl.parameter_grads(model, batch, counter)
    d = min_norm_fw(shared.grads).vector
    dots = [float(g @ d) for g in shared.grads]
    sqnorms = [float(g @ g) for g in task.grads]
    theta_sh = mdl.flatten(model.encoder)

    def candidate(eta):
        return mdl.unflatten(model.encoder, theta_sh - eta * d), mdl.stepped_decoders(model, task.grads, eta)

    def evaluate(eta):
        enc, decs = candidate(eta)
        z = mdl.forward_latent(model, batch.inputs, enc)
        counter.enc_fwd += 1
        return mdl.task_losses_from_latent(model, z, batch, counter, decs)

    eta, trials, floor, after, rhs = _search(cfg, evaluate, shared.losses, sqnorms, dots)
    enc, decs = candidate(eta)
    model.encoder = enc
    model.decoders = decs
    model.version += 1
    return StepResult(eta, trials, floor, list(shared.losses), after, counter.since(before), rhs, sqnorms, dots)


def fbls_step(model: MultiTaskModel, batch: Batch, cfg: LineSearchConfig, counter: PassCounter) -> StepResult:
    """One fast backtracking step: the search runs on the frozen latent batch."""
    if cfg.variant not in LATENT_VARIANTS:
        raise ConfigError(f"fbls_step needs a latent variant, got {cfg.variant.value}")
    before = counter.snapshot()
    latent = mdl.encode(model, batch, counter)
    zg, task = mdl.latent_grads(model, latent, batch, counter)
    d_z = min_norm_fw(zg.grads, space=LATENT).vector
    dots = [float(g @ d_z) for g in zg.grads]
    sqnorms = [float(g @ g) for g in task.grads]
    z_base = latent.z.flat()

    def evaluate(eta):
        decs = mdl.stepped_decoders(model, task.grads, eta)
        return mdl.task_losses_from_latent(model, z_base - eta * d_z, batch, counter, decs)

    eta, trials, floor, after, rhs = _search(cfg, evaluate, zg.losses, sqnorms, dots)
    shared_dir = mdl.encoder_vjp(model, latent, d_z, counter)
    for t, g in enumerate(task.grads):
        mdl.apply_step(model, t, g, eta)
    mdl.apply_step(model, "latent-induced-shared", shared_dir, eta)
    return StepResult(eta, trials, floor, list(zg.losses), after, counter.since(before), rhs, sqnorms, dots)


def decay_upper_bound(cfg: LineSearchConfig, epoch: int) -> LineSearchConfig:
    """Upper bound after ``epoch`` epochs of step decay (identity without decay)."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    if cfg.decay_rate is None:
        return cfg
    lr_ub = cfg.lr_ub * cfg.decay_rate ** (epoch // cfg.decay_period)
    # keep the floor strictly below the bound so the config stays valid
    eps = min(cfg.eps_floor, lr_ub * 0.5)
    return dataclasses.replace(cfg, lr_ub=lr_ub, eps_floor=eps)
