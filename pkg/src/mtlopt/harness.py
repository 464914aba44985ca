"""Training loop, optimizer strategies, grid comparison and metrics CSV output."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as dt
from . import model as mdl
from .config import CONSTANT_STEP, TrainConfig
from .direction import LATENT, min_norm_fw
from .errors import IoError, NumericError
from .linesearch import StepResult, bls_step, decay_upper_bound, fbls_step
from .model import Batch, MultiTaskModel, PassCounter

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "optimizer", "eta", "trials", "floor_hit", "task", "train_loss",
                  "test_loss", "test_error", "enc_fwd", "enc_bwd", "dec_fwd", "dec_bwd", "wall_ms"]


@dataclass
class StepRecord:
    epoch: int
    step: int
    optimizer: str
    eta: float
    trials: int
    floor_hit: bool
    train_loss: list[float]
    enc_fwd: int
    enc_bwd: int
    dec_fwd: int
    dec_bwd: int
    wall_ms: float
    test_loss: list[float] | None = None
    test_error: list[float] | None = None


@dataclass
class MetricsLog:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def epoch_times_ms(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for r in self.records:
            out[r.epoch] = out.get(r.epoch, 0.0) + r.wall_ms
        return out

    def mean_epoch_ms(self) -> float:
        """Mean epoch wall time, excluding the warm-up epoch when there is more than one."""
        times = self.epoch_times_ms()
        vals = [v for e, v in sorted(times.items()) if e > 0] or list(times.values())
        return float(np.mean(vals)) if vals else 0.0

    def final_test(self) -> tuple[list[float], list[float]] | None:
        for r in reversed(self.records):
            if r.test_loss is not None:
                return r.test_loss, r.test_error
        return None


# ---------------------------------------------------------------------------
# setup


@dataclass
class Problem:
    train: dt.Dataset
    test: dt.Dataset
    model: MultiTaskModel


def _digits_split(seed: int = 0, test_fraction: float = 0.2):
    images, labels = dt.digits_source()
    order = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    return {"test": (images[order[:n_test]], labels[order[:n_test]]),
            "train": (images[order[n_test:]], labels[order[n_test:]])}


def build_problem(cfg: TrainConfig) -> Problem:
    """Datasets and freshly initialised model for ``cfg``; deterministic in ``cfg.seed``."""
    d, m = cfg.data, cfg.model
    data_seed, model_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(data_seed)
    model_seed = int(model_seed.generate_state(1)[0])

    if d.dataset == "quadratic":
        toy = dt.quadratic_problem(d.centers)
        ds = toy.dataset()
        return Problem(ds, dt.Dataset(ds.inputs, ds.labels, "test"), toy.model(d.theta0))

    if d.dataset == "multimnist":
        if d.source == "digits":
            pools = _digits_split()
        else:
            pools = {s: dt.load_source(d.source, s) for s in ("train", "test")}
        # source images are uint8 from digits_source, [0, 1] floats from IDX files
        pools = {s: (im / 255.0 if im.dtype == np.uint8 else im, lab) for s, (im, lab) in pools.items()}
        train = dt.make_multimnist(*pools["train"], rng, d.n_train, d.shift_px, "train")
        test = dt.make_multimnist(*pools["test"], rng, d.n_test, d.shift_px, "test")
        kinds, outs = ["softmax_xent"] * 2, [10, 10]
    elif d.dataset == "synth":
        train, test = dt.synth_tasks(d.d_in, d.d_z_true, d.tasks, d.n_train, d.n_test, d.noise_sd,
                                     int(rng.integers(2**63)))
        kinds, outs = ["mse"] * d.tasks, [1] * d.tasks
    else:
        train = dt.read_dataset_csv(d.train_csv, "train")
        test = dt.read_dataset_csv(d.test_csv, "test")
        kinds, outs = [], []
        for ytr, yte in zip(train.labels, test.labels):
            if ytr.is_integer:
                kinds.append("softmax_xent")
                outs.append(int(max(ytr.data.max(), yte.data.max())) + 1)
            else:
                kinds.append("mse")
                outs.append(ytr.data.reshape(train.n, -1).shape[1])
    model = mdl.build_model(train.inputs.shape[1], m.encoder, m.decoder, outs, kinds, model_seed, m.activation)
    return Problem(train, test, model)


# ---------------------------------------------------------------------------
# constant-step strategies


def sgd_step(model: MultiTaskModel, batch: Batch, lr: float, counter: PassCounter) -> StepResult:
    """Plain SGD on the uniform mean of the task losses."""
    before = counter.snapshot()
    g_sh, g_task, losses = mdl.mean_loss_grads(model, batch, counter)
    for t, g in enumerate(g_task):
        mdl.apply_step(model, t, g, lr)
    mdl.apply_step(model, "shared", g_sh, lr)
    return StepResult(lr, 0, False, losses, losses, counter.since(before))


def sgd_mgda_step(model: MultiTaskModel, batch: Batch, lr: float, counter: PassCounter) -> StepResult:
    """Constant step along the min-norm direction of the shared-parameter gradients."""
    before = counter.snapshot()
    shared, task = mdl.parameter_grads(model, batch, counter)
    d = min_norm_fw(shared.grads).vector
    for t, g in enumerate(task.grads):
        mdl.apply_step(model, t, g, lr)
    mdl.apply_step(model, "shared", d, lr)
    return StepResult(lr, 0, False, shared.losses, shared.losses, counter.since(before))


def mgda_ub_step(model: MultiTaskModel, batch: Batch, lr: float, counter: PassCounter) -> StepResult:
    """Constant step along the latent min-norm direction, pulled back by one VJP."""
    before = counter.snapshot()
    latent = mdl.encode(model, batch, counter)
    zg, task = mdl.latent_grads(model, latent, batch, counter)
    d_z = min_norm_fw(zg.grads, space=LATENT).vector
    shared_dir = mdl.encoder_vjp(model, latent, d_z, counter)
    for t, g in enumerate(task.grads):
        mdl.apply_step(model, t, g, lr)
    mdl.apply_step(model, "latent-induced-shared", shared_dir, lr)
    return StepResult(lr, 0, False, zg.losses, zg.losses, counter.since(before))


_CONSTANT = {"sgd": sgd_step, "sgd-mgda": sgd_mgda_step, "mgda-ub": mgda_ub_step}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: MultiTaskModel, ds: dt.Dataset, chunk: int = 1024) -> tuple[list[float], list[float]]:
    """Per-task mean loss and error (1 - accuracy, or the loss itself for regression)."""
    T = model.n_tasks
    loss_sum, wrong = np.zeros(T), np.zeros(T)
    counter = PassCounter()  # evaluation passes are not charged to the optimizer
    for start in range(0, ds.n, chunk):
        b = ds.batch(slice(start, start + chunk))
        z = mdl.forward_latent(model, b.inputs)
        loss_sum += np.array(mdl.task_losses_from_latent(model, z, b, counter)) * b.n
        for t, (dec, kind, y) in enumerate(zip(model.decoders, model.loss_kinds, b.labels)):
            if kind == "softmax_xent":
                pred = mdl.run_layers(dec, z).data.argmax(axis=1)
                wrong[t] += np.sum(pred != y.data)
    losses = loss_sum / ds.n
    errors = [float(w / ds.n) if k == "softmax_xent" else float(l)
              for w, l, k in zip(wrong, losses, model.loss_kinds)]
    return [float(v) for v in losses], errors


# ---------------------------------------------------------------------------
# training


StepHook = Callable[[MultiTaskModel, MultiTaskModel, Batch, StepResult, str], None]


def train(cfg: TrainConfig, on_step: StepHook | None = None, problem: Problem | None = None) -> MetricsLog:
    """Run ``cfg.epochs`` epochs and return the per-step log.

    ``on_step(model_before, model_after, batch, result, optimizer)`` is
    called after every step when given (the pre-step model is a copy).
    On :class:`NumericError` the partial log is written to ``cfg.out`` (when
    set), attached to the exception as ``.log`` and the error re-raised.
    """
    cfg.validate()
    problem = problem or build_problem(cfg)
    model, ds = problem.model, problem.train
    name = cfg.optim.optimizer
    base_ls = cfg.line_search() if name not in CONSTANT_STEP else None
    order_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    counter = PassCounter()
    mlog = MetricsLog()
    steps_per_epoch = math.ceil(ds.n / cfg.batch_size)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            ls_cfg = decay_upper_bound(base_ls, epoch) if base_ls is not None else None
            perm = order_rng.permutation(ds.n)
            for k in range(steps_per_epoch):
                batch = ds.batch(perm[k * cfg.batch_size:(k + 1) * cfg.batch_size])
                before = model.copy() if on_step else None
                t0 = time.perf_counter()
                if name in _CONSTANT:
                    res = _CONSTANT[name](model, batch, cfg.optim.lr, counter)
                elif name == "bls":
                    res = bls_step(model, batch, ls_cfg, counter)
                else:
                    res = fbls_step(model, batch, ls_cfg, counter)
                wall = (time.perf_counter() - t0) * 1e3
                p = res.passes
                mlog.records.append(StepRecord(epoch, step, name, res.eta_accepted, res.trials, res.floor_hit,
                                               list(res.losses_before), p.enc_fwd, p.enc_bwd, p.dec_fwd,
                                               p.dec_bwd, wall))
                if on_step:
                    on_step(before, model, batch, res, name)
                step += 1
            tl, te = evaluate(model, problem.test)
            mlog.records[-1].test_loss, mlog.records[-1].test_error = tl, te
            log.debug("epoch %d %s test_loss=%s test_error=%s", epoch, name, tl, te)
    except NumericError as e:
        e.log = mlog
        if cfg.out:
            write_metrics(mlog, Path(cfg.out) / "metrics.csv")
        raise
    if cfg.out:
        write_metrics(mlog, Path(cfg.out) / "metrics.csv")
    return mlog


# ---------------------------------------------------------------------------
# metrics CSV


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_metrics(mlog: MetricsLog, path) -> Path:
    """One CSV row per (step, task); test columns are filled on epoch-end steps only."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for r in mlog.records:
                for t, loss in enumerate(r.train_loss):
                    tl = r.test_loss[t] if r.test_loss else None
                    te = r.test_error[t] if r.test_error else None
                    w.writerow([_fmt(r.epoch), _fmt(r.step), r.optimizer] +
                               [_fmt(v) for v in (r.eta, r.trials, r.floor_hit, t, loss, tl, te,
                                                  r.enc_fwd, r.enc_bwd, r.dec_fwd, r.dec_bwd, r.wall_ms)])
    except OSError as e:
        raise IoError(f"cannot write metrics to {path}: {e}") from e
    return path


def read_metrics(path) -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as e:
        raise IoError(f"cannot read metrics {path}: {e}") from e


# ---------------------------------------------------------------------------
# grid comparison


SUMMARY_HEADER = ["cell", "strategy", "lr", "status", "final_train_loss", "final_test_loss",
                  "final_test_error", "mean_epoch_ms", "relative_time_pct"]


def grid_cells(cfg: TrainConfig) -> list[tuple[str, float | None]]:
    cells = []
    for s in cfg.optim.strategies:
        if s in CONSTANT_STEP:
            cells.extend((s, lr) for lr in cfg.optim.lr_grid)
        else:
            cells.append((s, None))
    return cells


def _cell_config(cfg: TrainConfig, strategy: str, lr: float | None) -> TrainConfig:
    optim = replace(cfg.optim, optimizer=strategy, lr=lr if lr is not None else cfg.optim.lr)
    return replace(cfg, optim=optim, out=None)


def _run_cell(cfg: TrainConfig, idx: int, strategy: str, lr: float | None, out: Path | None):
    ccfg = _cell_config(cfg, strategy, lr)
    status = "ok"
    try:
        mlog = train(ccfg)
    except NumericError as e:
        mlog, status = e.log, "diverged"
    if out is not None:
        tag = strategy if lr is None else f"{strategy}_lr{lr:.3g}"
        write_metrics(mlog, out / f"cell{idx:02d}_{tag}.csv")
    return idx, strategy, lr, status, mlog


def compare(cfg: TrainConfig, out=None) -> list[dict]:
    """Run every strategy (and every lr of constant-step ones) from the same seed.

    Writes ``summary.csv`` (and one metrics CSV per cell) under ``out``.
    Relative time is normalised to the mean epoch time of the ``sgd`` rows,
    or of the first row when no ``sgd`` cell is present.
    """
    cfg.validate()
    out = Path(out) if out is not None else (Path(cfg.out) if cfg.out else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cells = grid_cells(cfg)
    workers = max(1, min(int(os.environ.get("MTLOPT_THREADS", "1")), len(cells)))
    if workers == 1:
        results = [_run_cell(cfg, i, s, lr, out) for i, (s, lr) in enumerate(cells)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cfg, i, s, lr, out) for i, (s, lr) in enumerate(cells)]
            results = sorted((f.result() for f in futures), key=lambda r: r[0])

    rows = []
    for idx, strategy, lr, status, mlog in results:
        last_epoch = mlog.records[-1].epoch if mlog.records else 0
        train_losses = [np.mean(r.train_loss) for r in mlog.records if r.epoch == last_epoch]
        final = mlog.final_test()
        rows.append({
            "cell": idx, "strategy": strategy, "lr": lr, "status": status,
            "final_train_loss": float(np.mean(train_losses)) if train_losses else None,
            "final_test_loss": float(np.mean(final[0])) if final else None,
            "final_test_error": float(np.mean(final[1])) if final else None,
            "mean_epoch_ms": mlog.mean_epoch_ms(),
        })
    base_rows = [r for r in rows if r["strategy"] == "sgd"] or rows[:1]
    base = float(np.mean([r["mean_epoch_ms"] for r in base_rows])) if base_rows else 0.0
    for r in rows:
        r["relative_time_pct"] = 100.0 * r["mean_epoch_ms"] / base if base > 0 else None
    if out is not None:
        try:
            with open(out / "summary.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(SUMMARY_HEADER)
                for r in rows:
                    w.writerow([r["cell"], r["strategy"], _fmt(r["lr"]), r["status"]] +
                               [_fmt(r[k]) for k in SUMMARY_HEADER[4:]])
        except OSError as e:
            raise IoError(f"cannot write summary: {e}") from e
    return rows
