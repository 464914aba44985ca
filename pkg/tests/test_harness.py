import csv
import math

import numpy as np
import pytest

from mtlopt import data as dt
from mtlopt import model as mdl
from mtlopt.config import TrainConfig, parse_config
from mtlopt.direction import min_norm_residual
from mtlopt.errors import NumericError
from mtlopt.harness import (METRICS_HEADER, MetricsLog, Problem, build_problem, compare, read_metrics, train,
                            write_metrics)

from oracles import hull_distance


def small_cfg(optimizer="fbls", **kw) -> TrainConfig:
    cfg = TrainConfig(epochs=kw.pop("epochs", 2), batch_size=kw.pop("batch_size", 32), seed=kw.pop("seed", 0))
    cfg.data.dataset = "synth"
    cfg.data.n_train, cfg.data.n_test = 100, 20
    cfg.model.encoder, cfg.model.decoder = (8, 4), (3,)
    cfg.optim.optimizer = optimizer
    for k, v in kw.items():
        setattr(cfg.optim, k, v)
    return cfg.validate()


def test_step_count_one_epoch():
    cfg = small_cfg(epochs=1, batch_size=32)
    assert len(train(cfg)) == math.ceil(100 / 32)


@pytest.mark.parametrize("name,expect", [
    ("fbls", lambda r, T: (r.enc_fwd, r.enc_bwd) == (1, 1)),
    ("mgda-ub", lambda r, T: (r.enc_fwd, r.enc_bwd) == (1, 1)),
    ("bls", lambda r, T: (r.enc_fwd, r.enc_bwd) == (1 + r.trials, T)),
    ("sgd", lambda r, T: (r.enc_fwd, r.enc_bwd) == (1, 1)),
    ("sgd-mgda", lambda r, T: (r.enc_fwd, r.enc_bwd) == (1, T)),
])
def test_pass_counts_per_step(name, expect):
    cfg = small_cfg(name, lr=0.05)
    mlog = train(cfg)
    assert all(expect(r, cfg.data.tasks) for r in mlog.records)


def test_sgd_eta_is_constant_lr(tmp_path):
    cfg = small_cfg("sgd", lr=0.03)
    cfg.out = str(tmp_path)
    train(cfg)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert rows and all(float(r["eta"]) == 0.03 for r in rows)


def _run(cfg, on_step=None):
    p = build_problem(cfg)
    train(cfg, on_step=on_step, problem=p)
    return mdl.flatten(p.model.encoder)


def test_quadratic_fbls_reaches_pareto_interval():
    cfg = TrainConfig(epochs=500, batch_size=1)
    cfg.data.dataset = "quadratic"
    cfg.optim.optimizer = "fbls"
    toy = dt.quadratic_problem(cfg.data.centers)
    residuals = []

    def hook(before, after, batch, res, name):
        residuals.append(min_norm_residual(toy.grads(mdl.flatten(after.encoder))))

    theta = _run(cfg, hook)
    assert min(residuals) < 1e-4
    assert -1.001 <= theta[0] <= 1.001


def test_quadratic_final_point_in_hull():
    cfg = TrainConfig(epochs=200, batch_size=1)
    cfg.data.dataset = "quadratic"
    cfg.data.centers = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    cfg.data.theta0 = (5.0, 5.0, 5.0)
    theta = _run(cfg)
    assert hull_distance(theta, cfg.data.centers) <= 1e-3


def test_write_metrics_empty_log(tmp_path):
    p = write_metrics(MetricsLog(), tmp_path / "m.csv")
    assert p.read_text() == ",".join(METRICS_HEADER) + "\n"


def test_write_metrics_read_back(tmp_path):
    mlog = train(small_cfg())
    rows = read_metrics(write_metrics(mlog, tmp_path / "m.csv"))
    assert len(rows) == len(mlog) * 2  # one row per (step, task)
    # test columns are filled on the last step of each epoch only
    filled = [r for r in rows if r["test_loss"]]
    assert len(filled) == 2 * 2


def test_float_precision_in_csv(tmp_path):
    mlog = train(small_cfg())
    rows = read_metrics(write_metrics(mlog, tmp_path / "m.csv"))
    assert float(rows[0]["train_loss"]) == mlog.records[0].train_loss[0]


@pytest.mark.filterwarnings("ignore:overflow")
def test_numeric_error_flushes_partial_log(tmp_path):
    cfg = small_cfg("sgd", lr=1e150, epochs=3)
    cfg.out = str(tmp_path)
    with pytest.raises(NumericError) as info:
        train(cfg)
    assert (tmp_path / "metrics.csv").exists()
    assert len(info.value.log) == len(read_metrics(tmp_path / "metrics.csv")) // 2


def test_same_seed_same_csv(tmp_path):
    for k in (1, 2):
        cfg = small_cfg("bls", seed=3)
        cfg.out = str(tmp_path / f"r{k}")
        train(cfg)

    def strip(path):
        with open(path) as fh:
            return [row[:-1] for row in csv.reader(fh)]

    assert strip(tmp_path / "r1/metrics.csv") == strip(tmp_path / "r2/metrics.csv")


def test_different_seed_changes_run():
    a = train(small_cfg(seed=0)).records[0].train_loss
    b = train(small_cfg(seed=1)).records[0].train_loss
    assert a != b


def test_fbls_decay_schedule_is_respected():
    cfg = small_cfg("fbls-decay", epochs=4, decay_period=1, lr_ub=2.0)
    for r in train(cfg).records:
        assert r.eta <= 2.0 * 0.5 ** r.epoch


def test_compare_grid_rows_and_normalisation(tmp_path):
    cfg = small_cfg(epochs=2, lr_grid=(0.01, 0.1), strategies=("sgd", "fbls", "bls"))
    rows = compare(cfg, tmp_path)
    assert [r["strategy"] for r in rows] == ["sgd", "sgd", "fbls", "bls"]
    sgd_pct = [r["relative_time_pct"] for r in rows if r["strategy"] == "sgd"]
    assert np.mean(sgd_pct) == pytest.approx(100.0)
    with open(tmp_path / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert len(list(tmp_path.glob("cell*.csv"))) == 4


def test_compare_default_grid_has_eight_sgd_rows():
    cfg = small_cfg(epochs=1, strategies=("sgd", "bls", "fbls"))
    rows = compare(cfg)
    assert len(rows) == 8 + 2
    assert sum(r["strategy"] == "sgd" for r in rows) == 8


def test_compare_threads_match_serial(monkeypatch):
    cfg = small_cfg(epochs=1, lr_grid=(0.01, 0.1), strategies=("sgd", "fbls"))
    serial = compare(cfg)
    monkeypatch.setenv("MTLOPT_THREADS", "3")
    threaded = compare(cfg)
    key = lambda rows: [(r["strategy"], r["lr"], r["final_test_loss"]) for r in rows]  # noqa: E731
    assert key(serial) == key(threaded)


def test_config_file_drives_training(tmp_path):
    cfg = parse_config("epochs = 1\nbatch_size = 50\n[data]\ndataset = synth\nn_train = 100\nn_test = 10\n"
                       "[model]\nencoder = 6, 3\n[optimizer]\noptimizer = mgda-ub\nlr = 0.1\n")
    assert len(train(cfg)) == 2


def test_csv_dataset_problem(tmp_path):
    tr, te = dt.synth_tasks(3, 2, 2, 40, 10, 0.0, seed=0)
    dt.write_dataset_csv(tr, tmp_path / "d_train.csv")
    dt.write_dataset_csv(te, tmp_path / "d_test.csv")
    cfg = TrainConfig(epochs=1, batch_size=20)
    cfg.data.dataset = "csv"
    cfg.data.train_csv, cfg.data.test_csv = str(tmp_path / "d_train.csv"), str(tmp_path / "d_test.csv")
    cfg.model.encoder = (5, 3)
    assert len(train(cfg)) == 2


def test_custom_problem_is_used():
    tr, te = dt.synth_tasks(3, 2, 1, 10, 5, 0.0, seed=0)
    m = mdl.build_model(3, [4], [], [1], ["mse"], seed=0)
    cfg = TrainConfig(epochs=1, batch_size=10)
    cfg.data.dataset = "synth"
    train(cfg, problem=Problem(tr, te, m))
    assert m.version == 1
