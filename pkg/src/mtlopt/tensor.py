"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Only the handful of primitives the encoder/decoder MLPs need are supported:
``matmul``, ``add``, ``scale``, ``relu``, ``tanh``, ``mean``, ``softmax_xent``
and ``mse``.  Forward kernels are plain numpy functions shared between eager
evaluation and :meth:`Tape.replay`, so a replay reproduces every node value
bit for bit.

Example::

    tape = Tape()
    w = tape.watch(Tensor([1.0, 2.0]), "w")
    loss = mean(scale(w, 3.0, tape=tape), tape=tape)
    grads = backward(tape, tape.node_of(loss))
    grads["w"].numpy()   # array([1.5, 1.5])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError, ShapeError

OP_KINDS = ("matmul", "add", "scale", "relu", "tanh", "mean", "softmax_xent", "mse")


class Tensor:
    """Immutable dense array of float64 (or int64 for label vectors)."""

    __slots__ = ("_data",)

    def __init__(self, data: Any):
        arr = np.array(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericError("tensor contains non-finite entries")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # trusted internal path: arr is a fresh float64 array already checked
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    @property
    def is_integer(self) -> bool:
        return self._data.dtype.kind == "i"

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def flat(self) -> np.ndarray:
        return self._data.ravel()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"Tensor({self._data!r})"


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# forward kernels: (arrays...) -> (value, saved)


def _fwd_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    return a @ b, None


def _fwd_add(a, b):
    # equal shapes, or a bias row matching the trailing dimension
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add shapes {a.shape} and {b.shape} do not conform")
    return a + b, None


def _fwd_scale(x, c):
    if c.size != 1:
        raise ShapeError(f"scale factor must be a scalar, got shape {c.shape}")
    return x * c.reshape(()), None


def _fwd_relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def _fwd_tanh(x):
    y = np.tanh(x)
    return y, y


def _fwd_mean(x):
    return np.asarray(x.mean()), None


def _fwd_softmax_xent(logits, labels):
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_xent needs logits [n x C] and labels [n], got {logits.shape}, {labels.shape}")
    if labels.dtype.kind not in "iu":
        raise ShapeError("softmax_xent labels must be integers")
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss), np.exp(logp)


def _mse_count(a) -> int:
    return a.shape[0] if a.ndim >= 2 else 1


def _fwd_mse(a, b):
    # half squared error, averaged over the batch (leading) axis
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes {a.shape} and {b.shape} differ")
    diff = a - b
    return np.asarray(0.5 * np.sum(diff * diff) / _mse_count(a)), diff


_FORWARD: dict[str, tuple[int, Callable]] = {
    "matmul": (2, _fwd_matmul),
    "add": (2, _fwd_add),
    "scale": (2, _fwd_scale),
    "relu": (1, _fwd_relu),
    "tanh": (1, _fwd_tanh),
    "mean": (1, _fwd_mean),
    "softmax_xent": (2, _fwd_softmax_xent),
    "mse": (2, _fwd_mse),
}


# ---------------------------------------------------------------------------
# backward kernels: (g, inputs, value, saved) -> per-input cotangents (None = no grad)


def _bwd_matmul(g, ins, out, saved):
    a, b = ins
    return g @ b.T, a.T @ g


def _bwd_add(g, ins, out, saved):
    a, b = ins
    gb = g if b.shape == a.shape else g.reshape(-1, b.shape[0]).sum(axis=0)
    return g, gb


def _bwd_scale(g, ins, out, saved):
    x, c = ins
    return g * c.reshape(()), np.reshape(np.sum(g * x), c.shape)


def _bwd_relu(g, ins, out, mask):
    return (np.where(mask, g, 0.0),)


def _bwd_tanh(g, ins, out, y):
    return (g * (1.0 - y * y),)


def _bwd_mean(g, ins, out, saved):
    (x,) = ins
    return (np.full(x.shape, g / x.size),)


def _bwd_softmax_xent(g, ins, out, probs):
    logits, labels = ins
    n = logits.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d * (g / n), None


def _bwd_mse(g, ins, out, diff):
    a, _ = ins
    ga = diff * (g / _mse_count(a))
    return ga, -ga


_BACKWARD: dict[str, Callable] = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "scale": _bwd_scale,
    "relu": _bwd_relu,
    "tanh": _bwd_tanh,
    "mean": _bwd_mean,
    "softmax_xent": _bwd_softmax_xent,
    "mse": _bwd_mse,
}


@dataclass
class Node:
    kind: str  # an op kind, "leaf" or "const"
    inputs: tuple[int, ...]
    value: np.ndarray
    saved: Any = None
    key: Hashable | None = None


@dataclass
class Tape:
    """Single-writer record of primitive applications in topological order."""

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[Hashable, int] = field(default_factory=dict)
    _index: dict[int, int] = field(default_factory=dict, repr=False)
    _refs: list[Tensor] = field(default_factory=list, repr=False)

    def _push(self, node: Node, tensor: Tensor) -> int:
        nid = len(self.nodes)
        self.nodes.append(node)
        self._index[id(tensor)] = nid
        self._refs.append(tensor)
        return nid

    def watch(self, tensor: Tensor, key: Hashable) -> Tensor:
        """Register ``tensor`` as a differentiable leaf named ``key``."""
        if key in self.leaves:
            raise InputError(f"leaf {key!r} already registered")
        if id(tensor) in self._index:
            raise InputError("tensor is already recorded on this tape")
        self.leaves[key] = self._push(Node("leaf", (), tensor.data, key=key), tensor)
        return tensor

    def node_of(self, tensor: Tensor) -> int:
        try:
            return self._index[id(tensor)]
        except KeyError:
            raise InputError("tensor is not recorded on this tape") from None

    def _input_id(self, tensor: Tensor) -> int:
        nid = self._index.get(id(tensor))
        if nid is None:
            nid = self._push(Node("const", (), tensor.data), tensor)
        return nid

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, saved: Any) -> int:
        ids = tuple(self._input_id(t) for t in inputs)
        return self._push(Node(kind, ids, out.data, saved), out)

    def replay(self, leaf_values: Mapping[Hashable, Any] | None = None) -> list[np.ndarray]:
        """Recompute every node value from the leaves (optionally substituted)."""
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                v = leaf_values.get(node.key, node.value)
                values.append(np.asarray(v, dtype=np.float64))
            elif node.kind == "const":
                values.append(node.value)
            else:
                v, _ = _FORWARD[node.kind][1](*(values[i] for i in node.inputs))
                values.append(v)
        return values


def tensor_op(kind: str, inputs: Sequence[Any], tape: Tape | None = None) -> Tensor:
    """Apply primitive ``kind`` to ``inputs``; record on ``tape`` when given."""
    try:
        arity, fwd = _FORWARD[kind]
    except KeyError:
        raise InputError(f"unknown op kind {kind!r}") from None
    if len(inputs) != arity:
        raise ShapeError(f"{kind} takes {arity} inputs, got {len(inputs)}")
    tensors = [as_tensor(t) for t in inputs]
    value, saved = fwd(*(t.data for t in tensors))
    value = np.asarray(value, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NumericError(f"{kind} produced a non-finite value")
    out = Tensor._wrap(value)
    if tape is not None:
        tape.record(kind, tensors, out, saved)
    return out


def matmul(a, b, tape=None):
    return tensor_op("matmul", [a, b], tape)


def add(a, b, tape=None):
    return tensor_op("add", [a, b], tape)


def scale(x, c, tape=None):
    return tensor_op("scale", [x, c], tape)


def relu(x, tape=None):
    return tensor_op("relu", [x], tape)


def tanh(x, tape=None):
    return tensor_op("tanh", [x], tape)


def mean(x, tape=None):
    return tensor_op("mean", [x], tape)


def softmax_xent(logits, labels, tape=None):
    return tensor_op("softmax_xent", [logits, labels], tape)


def mse(a, b, tape=None):
    return tensor_op("mse", [a, b], tape)


def vjp(tape: Tape, node: int, cotangent: Any) -> dict[Hashable, Tensor]:
    """Pull ``cotangent`` (shaped like node ``node``) back to every leaf.

    Leaves that ``node`` does not depend on receive zero tensors.
    """
    nodes = tape.nodes
    if not 0 <= node < len(nodes):
        raise InputError(f"node {node} not on tape")
    ct = np.asarray(cotangent, dtype=np.float64)
    if ct.shape != nodes[node].value.shape:
        if ct.size != nodes[node].value.size:
            raise ShapeError(f"cotangent shape {ct.shape} does not match node shape {nodes[node].value.shape}")
        ct = ct.reshape(nodes[node].value.shape)

    grads: dict[int, np.ndarray] = {node: ct}
    for nid in range(node, -1, -1):
        n = nodes[nid]
        if n.kind in ("leaf", "const") or nid not in grads:
            continue
        g = grads[nid] if n.kind == "leaf" else grads.pop(nid)
        ins = [nodes[i].value for i in n.inputs]
        for i, gi in zip(n.inputs, _BACKWARD[n.kind](g, ins, n.value, n.saved)):
            if gi is None or nodes[i].kind == "const":
                continue
            grads[i] = grads[i] + gi if i in grads else gi

    out: dict[Hashable, Tensor] = {}
    for key, nid in tape.leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(nodes[nid].value)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for leaf {key!r}")
        out[key] = Tensor._wrap(np.array(g, dtype=np.float64))
    return out


def backward(tape: Tape, root: int, seed: float = 1.0) -> dict[Hashable, Tensor]:
    """Gradient of scalar node ``root`` times ``seed`` for every tape leaf."""
    if not 0 <= root < len(tape.nodes):
        raise InputError(f"node {root} not on tape")
    if tape.nodes[root].value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {tape.nodes[root].value.shape}")
    return vjp(tape, root, np.full(tape.nodes[root].value.shape, float(seed)))


def finite_diff(f: Callable[[Tensor], Any], x: Any, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise InputError("h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    flat = base.ravel()
    out = np.empty_like(flat)

    def ev(arr):
        v = f(Tensor(arr.reshape(base.shape)))
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise NumericError("f returned a non-finite value")
        return v

    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        out[i] = (ev(xp) - ev(xm)) / (2.0 * h)
    return Tensor(out.reshape(base.shape))
