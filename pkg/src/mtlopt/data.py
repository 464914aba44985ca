"""Datasets: IDX ingestion, MultiMNIST overlays, synthetic regression tasks, quadratic toys."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InputError, IoError, ShapeError
from .model import Batch, Layer, MultiTaskModel
from .tensor import Tensor

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803

# file names used by the MNIST distribution
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    inputs: Tensor
    labels: list[Tensor]
    split: str = "train"

    def __post_init__(self):
        n = self.inputs.shape[0]
        for y in self.labels:
            if y.shape[0] != n:
                raise ShapeError("every task must have one label per sample")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.labels)

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.inputs, self.labels)
        return Batch(Tensor(self.inputs.data[idx]), [Tensor(y.data[idx]) for y in self.labels])


# ---------------------------------------------------------------------------
# IDX


def read_idx(path) -> Tensor:
    """Read an IDX image (0x803, scaled to [0, 1]) or label (0x801) file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(str(e)) from e
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABELS:
        ndim = 1
    elif magic == IDX_IMAGES:
        ndim = 3
    else:
        raise FormatError(f"{path}: unknown IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, expected {count}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return Tensor(payload.astype(np.int64))
    return Tensor(payload / 255.0)


def write_idx(path, array) -> None:
    """Write labels (1-D ints) or images (3-D, floats in [0, 1] or uint8) as IDX."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.ndim == 1:
        magic, payload = IDX_LABELS, arr.astype(np.uint8)
    elif arr.ndim == 3:
        magic = IDX_IMAGES
        payload = arr if arr.dtype == np.uint8 else np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        raise ShapeError(f"IDX writer handles 1-D labels or 3-D images, got {arr.ndim}-D")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    try:
        Path(path).write_bytes(header + payload.tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def digits_source(size: int = 28, box: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """MNIST-style uint8 digit images built from scikit-learn's bundled 8x8 digits.

    Each 8x8 digit is bilinearly resized to ``box`` pixels and centred on a
    ``size`` canvas, mirroring MNIST's 20-in-28 framing.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    small = digits.images / 16.0
    big = np.clip(zoom(small, (1, box / 8, box / 8), order=1), 0.0, 1.0)
    pad = (size - box) // 2
    out = np.zeros((len(small), size, size))
    out[:, pad:pad + box, pad:pad + box] = big
    return np.rint(out * 255).astype(np.uint8), digits.target.astype(np.int64)


def write_digits_idx(out_dir, test_fraction: float = 0.2, seed: int = 0) -> dict[str, tuple[Path, Path]]:
    """Materialise :func:`digits_source` as MNIST-named train/t10k IDX files."""
    images, labels = digits_source()
    order = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    parts = {"test": order[:n_test], "train": order[n_test:]}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, idx in parts.items():
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / img_name, images[idx])
        write_idx(out / lab_name, labels[idx])
        paths[split] = (out / img_name, out / lab_name)
    return paths


def load_source(source_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    img_name, lab_name = MNIST_FILES[split]
    d = Path(source_dir)
    return read_idx(d / img_name).data, read_idx(d / lab_name).data


# ---------------------------------------------------------------------------
# generators


def make_multimnist(images, labels, rng: np.random.Generator, n_out: int, shift_px: int = 4,
                    split: str = "train") -> Dataset:
    """Two-digit overlays: first digit top-left, second shifted by ``shift_px``, pixel max.

    Pairs always carry distinct labels; task 1 predicts the first digit and
    task 2 the second.
    """
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.int64)
    if shift_px < 0:
        raise InputError("shift_px must be non-negative")
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ShapeError(f"expected square images [N x r x r], got {images.shape}")
    if len(images) < 2 or len(np.unique(labels)) < 2:
        raise InputError("need at least two source images with distinct labels")
    N, r, _ = images.shape
    first = rng.integers(0, N, size=n_out)
    second = rng.integers(0, N, size=n_out)
    clash = labels[first] == labels[second]
    while clash.any():
        second[clash] = rng.integers(0, N, size=int(clash.sum()))
        clash = labels[first] == labels[second]
    side = r + shift_px
    canvas = np.zeros((n_out, side, side))
    canvas[:, :r, :r] = images[first]
    np.maximum(canvas[:, shift_px:, shift_px:], images[second], out=canvas[:, shift_px:, shift_px:])
    return Dataset(Tensor(canvas.reshape(n_out, side * side)),
                   [Tensor(labels[first]), Tensor(labels[second])], split)


def synth_tasks(d_in: int, d_z_true: int, T: int, n_train: int, n_test: int, noise_sd: float = 0.0,
                seed: int = 0, heads=None) -> tuple[Dataset, Dataset]:
    """Regression tasks sharing a hidden representation ``tanh(x M)``.

    ``heads`` (T x d_z_true) overrides the random per-task heads.
    """
    if min(d_in, d_z_true, T, n_train, n_test) < 1 or noise_sd < 0:
        raise InputError("sizes must be positive and noise_sd non-negative")
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d_in, d_z_true)) / np.sqrt(d_in)
    H = rng.normal(size=(T, d_z_true)) if heads is None else np.asarray(heads, dtype=np.float64)
    if H.shape != (T, d_z_true):
        raise ShapeError(f"heads must be [{T} x {d_z_true}]")

    def draw(n, split):
        x = rng.normal(size=(n, d_in))
        hidden = np.tanh(x @ M)
        ys = [hidden @ H[t] + noise_sd * rng.normal(size=n) for t in range(T)]
        return Dataset(Tensor(x), [Tensor(y.reshape(n, 1)) for y in ys], split)

    return draw(n_train, "train"), draw(n_test, "test")


@dataclass
class ToyProblem:
    """``L_t(theta) = 0.5 * scale_t * ||theta - a_t||^2``."""

    centers: np.ndarray  # T x d
    scales: np.ndarray

    def __post_init__(self):
        if np.any(self.scales <= 0):
            raise InputError("scales must be positive")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def losses(self, theta) -> list[float]:
        diff = np.asarray(theta, dtype=np.float64).ravel() - self.centers
        return list(0.5 * self.scales * np.sum(diff * diff, axis=1))

    def grads(self, theta) -> list[np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64).ravel()
        return [s * (theta - a) for a, s in zip(self.centers, self.scales)]

    def model(self, theta0) -> MultiTaskModel:
        """Model whose latent is the shared vector itself; decoders are empty."""
        if np.any(self.scales != 1.0):
            raise InputError("only unit scales have a model form")
        w = Tensor(np.asarray(theta0, dtype=np.float64).reshape(1, self.dim))
        return MultiTaskModel([Layer(w, None, "identity")], [[] for _ in self.centers],
                              ["mse"] * len(self.centers))

    def batch(self) -> Batch:
        return Batch(Tensor(np.ones((1, 1))), [Tensor(a.reshape(1, -1)) for a in self.centers])

    def dataset(self) -> Dataset:
        return Dataset(Tensor(np.ones((1, 1))), [Tensor(a.reshape(1, -1)) for a in self.centers])


def quadratic_problem(centers: Sequence, scales: Sequence[float] | None = None) -> ToyProblem:
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if c.ndim != 2:
        raise ShapeError("centers must be equal-length vectors")
    if c.shape[0] == 1 and np.ndim(centers) == 1:
        c = c.T  # scalar centres given as a flat list
    s = np.ones(len(c)) if scales is None else np.asarray(scales, dtype=np.float64)
    return ToyProblem(c, s)


# ---------------------------------------------------------------------------
# CSV persistence


def write_dataset_csv(ds: Dataset, path) -> None:
    """Header row then one sample per row; label columns end in ``_t<k>`` (k from 1)."""
    x = ds.inputs.data
    cols = [f"x{j}" for j in range(x.shape[1])]
    blocks = [x]
    for k, y in enumerate(ds.labels, start=1):
        arr = y.data.reshape(ds.n, -1)
        if y.is_integer:
            cols.append(f"label_t{k}")
        elif arr.shape[1] == 1:
            cols.append(f"target_t{k}")
        else:
            cols.extend(f"target{j}_t{k}" for j in range(arr.shape[1]))
        blocks.append(arr)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(ds.n):
                row = []
                for b in blocks:
                    row.extend(str(int(v)) if b.dtype.kind == "i" else repr(float(v)) for v in b[i])
                w.writerow(row)
    except OSError as e:
        raise IoError(str(e)) from e


def read_dataset_csv(path, split: str = "train") -> Dataset:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise IoError(str(e)) from e
    if not rows:
        raise FormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise FormatError(f"{path}: no samples")
    table = np.array(body, dtype=object)
    xcols = [i for i, c in enumerate(header) if c.startswith("x")]
    tasks: dict[int, list[int]] = {}
    for i, c in enumerate(header):
        if "_t" in c and not c.startswith("x"):
            tasks.setdefault(int(c.rsplit("_t", 1)[1]), []).append(i)
    try:
        x = table[:, xcols].astype(np.float64)
        labels = []
        for k in sorted(tasks):
            idx = tasks[k]
            if header[idx[0]].startswith("label_"):
                labels.append(Tensor(table[:, idx[0]].astype(np.int64)))
            else:
                labels.append(Tensor(table[:, idx].astype(np.float64)))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return Dataset(Tensor(x), labels, split)
