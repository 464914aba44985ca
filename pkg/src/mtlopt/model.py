"""Hard-parameter-sharing encoder/decoder MLPs with an explicit latent boundary.

All gradient entry points keep count of encoder and decoder passes in a
:class:`PassCounter` so the optimizers' cost contracts can be checked from
the logs.  Flat parameter vectors are ordered layer by layer, weight before
bias, weights in row-major order.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import InputError, NumericError, ShapeError, StaleLatentError
from .tensor import Tape, Tensor

ACTIVATIONS = ("identity", "relu", "tanh")
LOSS_KINDS = ("softmax_xent", "mse")

SHARED = "shared-parameter"
LATENT = "latent"
TASK = "task-parameter"


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor | None
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.data.size + (0 if self.bias is None else self.bias.data.size)


@dataclass
class MultiTaskModel:
    encoder: list[Layer]
    decoders: list[list[Layer]]
    loss_kinds: list[str]
    version: int = 0  # bumped whenever shared parameters change

    def __post_init__(self):
        if not self.encoder:
            raise ShapeError("encoder needs at least one layer")
        if not self.decoders or len(self.decoders) != len(self.loss_kinds):
            raise ShapeError("need one loss kind per decoder and T >= 1")
        for kind in self.loss_kinds:
            if kind not in LOSS_KINDS:
                raise InputError(f"unknown loss kind {kind!r}")
        _check_chain(self.encoder, self.encoder[0].in_dim)
        for dec in self.decoders:
            _check_chain(dec, self.latent_dim)

    @property
    def n_tasks(self) -> int:
        return len(self.decoders)

    @property
    def input_dim(self) -> int:
        return self.encoder[0].in_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def shared_size(self) -> int:
        return sum(layer.size for layer in self.encoder)

    def task_size(self, t: int) -> int:
        return sum(layer.size for layer in self.decoders[t])

    def output_dim(self, t: int) -> int:
        dec = self.decoders[t]
        return dec[-1].out_dim if dec else self.latent_dim

    def copy(self) -> "MultiTaskModel":
        return copy.deepcopy(self)


def _check_chain(layers: Sequence[Layer], width: int) -> None:
    for i, layer in enumerate(layers):
        if layer.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {layer.activation!r}")
        if layer.in_dim != width:
            raise ShapeError(f"layer {i} expects width {layer.in_dim}, receives {width}")
        if layer.bias is not None and layer.bias.shape != (layer.out_dim,):
            raise ShapeError(f"layer {i} bias shape {layer.bias.shape} != ({layer.out_dim},)")
        width = layer.out_dim


@dataclass
class Batch:
    inputs: Tensor
    labels: list[Tensor]

    def __post_init__(self):
        self.inputs = tn.as_tensor(self.inputs)
        self.labels = [tn.as_tensor(y) for y in self.labels]
        if len(self.inputs.shape) != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be [n x d_in] with n >= 1, got {self.inputs.shape}")
        for y in self.labels:
            if y.shape[0] != self.n:
                raise ShapeError("label count does not match batch size")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass
class PassCounter:
    enc_fwd: int = 0
    enc_bwd: int = 0
    dec_fwd: int = 0
    dec_bwd: int = 0

    def snapshot(self) -> "PassCounter":
        return PassCounter(self.enc_fwd, self.enc_bwd, self.dec_fwd, self.dec_bwd)

    def since(self, before: "PassCounter") -> "PassCounter":
        return PassCounter(self.enc_fwd - before.enc_fwd, self.enc_bwd - before.enc_bwd,
                           self.dec_fwd - before.dec_fwd, self.dec_bwd - before.dec_bwd)


@dataclass
class LatentBatch:
    z: Tensor
    tape: Tape
    model: MultiTaskModel = field(repr=False)
    version: int = 0

    @property
    def node(self) -> int:
        return self.tape.node_of(self.z)


@dataclass
class GradientBundle:
    space: str
    grads: list[np.ndarray]
    losses: list[float]

    def __post_init__(self):
        # task blocks may legitimately differ in size between tasks
        if self.space != TASK and len({g.size for g in self.grads}) > 1:
            raise ShapeError("per-task gradients differ in length")
        if not all(np.isfinite(self.losses)):
            raise NumericError("non-finite task loss")


# ---------------------------------------------------------------------------
# construction


def init_layers(widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> list[Layer]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialised dense layers."""
    layers = []
    for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
        s = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-s, s, size=(fan_in, fan_out))
        b = rng.uniform(-s, s, size=fan_out)
        layers.append(Layer(Tensor(w), Tensor(b), act))
    return layers


def build_model(input_dim: int, encoder_widths: Sequence[int], decoder_hidden: Sequence[int],
                output_dims: Sequence[int], loss_kinds: Sequence[str], seed: int = 0,
                activation: str = "relu") -> MultiTaskModel:
    """MLP encoder ``input_dim -> *encoder_widths`` and one MLP decoder per task.

    The last encoder width is the latent dimension.  Hidden layers use
    ``activation``; the latent layer and decoder outputs are linear.
    """
    if not encoder_widths:
        raise ShapeError("encoder_widths must name at least the latent width")
    rng = np.random.default_rng(seed)
    enc_w = [input_dim, *encoder_widths]
    enc_act = [activation] * (len(encoder_widths) - 1) + ["identity"]
    encoder = init_layers(enc_w, enc_act, rng)
    decoders = []
    for out in output_dims:
        dec_w = [encoder_widths[-1], *decoder_hidden, out]
        dec_act = [activation] * len(decoder_hidden) + ["identity"]
        decoders.append(init_layers(dec_w, dec_act, rng))
    return MultiTaskModel(encoder, decoders, list(loss_kinds))


# ---------------------------------------------------------------------------
# flat parameter views


def flatten(layers: Sequence[Layer]) -> np.ndarray:
    parts = []
    for layer in layers:
        parts.append(layer.weight.flat())
        if layer.bias is not None:
            parts.append(layer.bias.flat())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(layers: Sequence[Layer], vector: np.ndarray) -> list[Layer]:
    """Layers with the same structure as ``layers`` holding ``vector``'s values."""
    vector = np.asarray(vector, dtype=np.float64)
    size = sum(layer.size for layer in layers)
    if vector.size != size:
        raise ShapeError(f"vector length {vector.size} != parameter block size {size}")
    out, pos = [], 0
    for layer in layers:
        n = layer.weight.data.size
        w = Tensor(vector[pos:pos + n].reshape(layer.weight.shape))
        pos += n
        b = None
        if layer.bias is not None:
            b = Tensor(vector[pos:pos + layer.out_dim])
            pos += layer.out_dim
        out.append(Layer(w, b, layer.activation))
    return out


def _leaf_keys(prefix: str, layers: Sequence[Layer]) -> list[str]:
    keys = []
    for i, layer in enumerate(layers):
        keys.append(f"{prefix}.{i}.weight")
        if layer.bias is not None:
            keys.append(f"{prefix}.{i}.bias")
    return keys


def _gather(grads, prefix: str, layers: Sequence[Layer]) -> np.ndarray:
    keys = _leaf_keys(prefix, layers)
    if not keys:
        return np.zeros(0)
    return np.concatenate([grads[k].flat() for k in keys])


# ---------------------------------------------------------------------------
# forward passes


def run_layers(layers: Sequence[Layer], x: Tensor, tape: Tape | None = None, prefix: str | None = None) -> Tensor:
    """Apply dense layers; when ``prefix`` is set, parameters are watched as leaves."""
    h = x
    for i, layer in enumerate(layers):
        w, b = layer.weight, layer.bias
        if tape is not None and prefix is not None:
            tape.watch(w, f"{prefix}.{i}.weight")
            if b is not None:
                tape.watch(b, f"{prefix}.{i}.bias")
        h = tn.matmul(h, w, tape)
        if b is not None:
            h = tn.add(h, b, tape)
        if layer.activation == "relu":
            h = tn.relu(h, tape)
        elif layer.activation == "tanh":
            h = tn.tanh(h, tape)
    return h


def task_loss(kind: str, out: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    if kind == "softmax_xent":
        return tn.softmax_xent(out, target, tape)
    if target.shape != out.shape:
        target = Tensor(target.data.reshape(out.shape))
    return tn.mse(out, target, tape)


def _check_input(model: MultiTaskModel, batch: Batch) -> None:
    if batch.inputs.shape[1] != model.input_dim:
        raise ShapeError(f"batch input width {batch.inputs.shape[1]} != model input width {model.input_dim}")
    if len(batch.labels) != model.n_tasks:
        raise ShapeError(f"batch has {len(batch.labels)} label sets for {model.n_tasks} tasks")


def encode(model: MultiTaskModel, batch: Batch, counter: PassCounter) -> LatentBatch:
    """Encoder forward pass recorded on a fresh tape."""
    _check_input(model, batch)
    tape = Tape()
    z = run_layers(model.encoder, batch.inputs, tape, "enc")
    counter.enc_fwd += 1
    return LatentBatch(z, tape, model, model.version)


def forward_latent(model: MultiTaskModel, inputs: Tensor, encoder: Sequence[Layer] | None = None) -> Tensor:
    """Untaped encoder pass (no counting); ``encoder`` overrides the model's layers."""
    return run_layers(model.encoder if encoder is None else encoder, tn.as_tensor(inputs))


def task_losses_from_latent(model: MultiTaskModel, z, batch: Batch, counter: PassCounter,
                            decoders: Sequence[Sequence[Layer]] | None = None) -> list[float]:
    """Per-task batch losses of the decoders applied to latent ``z``."""
    z = tn.as_tensor(z)
    if z.shape != (batch.n, model.latent_dim):
        if z.data.size != batch.n * model.latent_dim:
            raise ShapeError(f"latent shape {z.shape} does not match [{batch.n} x {model.latent_dim}]")
        z = Tensor(z.data.reshape(batch.n, model.latent_dim))
    decoders = model.decoders if decoders is None else decoders
    losses = []
    for dec, kind, y in zip(decoders, model.loss_kinds, batch.labels):
        out = run_layers(dec, z)
        losses.append(task_loss(kind, out, y).item())
    counter.dec_fwd += model.n_tasks
    return losses


def _check_fresh(model: MultiTaskModel, latent: LatentBatch) -> None:
    if latent.model is not model or latent.version != model.version:
        raise StaleLatentError("shared parameters changed since this latent batch was encoded")


def latent_grads(model: MultiTaskModel, latent: LatentBatch, batch: Batch,
                 counter: PassCounter) -> tuple[GradientBundle, GradientBundle]:
    """Per-task gradients w.r.t. the latent batch (flattened) and decoder parameters."""
    _check_fresh(model, latent)
    z_grads, task_grads, losses = [], [], []
    for t, (dec, kind, y) in enumerate(zip(model.decoders, model.loss_kinds, batch.labels)):
        tape = Tape()
        z = tape.watch(latent.z, "z")
        out = run_layers(dec, z, tape, f"dec{t}")
        loss = task_loss(kind, out, y, tape)
        g = tn.backward(tape, tape.node_of(loss))
        z_grads.append(g["z"].flat().copy())
        task_grads.append(_gather(g, f"dec{t}", dec))
        losses.append(loss.item())
    counter.dec_fwd += model.n_tasks
    counter.dec_bwd += model.n_tasks
    return GradientBundle(LATENT, z_grads, losses), GradientBundle(TASK, task_grads, losses)


def parameter_grads(model: MultiTaskModel, batch: Batch,
                    counter: PassCounter) -> tuple[GradientBundle, GradientBundle]:
    """Per-task gradients w.r.t. shared and task parameters.

    One encoder forward, then one full backward sweep per task.
    """
    _check_input(model, batch)
    tape = Tape()
    z = run_layers(model.encoder, batch.inputs, tape, "enc")
    counter.enc_fwd += 1
    roots, losses = [], []
    for t, (dec, kind, y) in enumerate(zip(model.decoders, model.loss_kinds, batch.labels)):
        out = run_layers(dec, z, tape, f"dec{t}")
        loss = task_loss(kind, out, y, tape)
        roots.append(tape.node_of(loss))
        losses.append(loss.item())
    counter.dec_fwd += model.n_tasks
    shared, task = [], []
    for t, root in enumerate(roots):
        g = tn.backward(tape, root)
        shared.append(_gather(g, "enc", model.encoder))
        task.append(_gather(g, f"dec{t}", model.decoders[t]))
    counter.enc_bwd += model.n_tasks
    counter.dec_bwd += model.n_tasks
    return GradientBundle(SHARED, shared, losses), GradientBundle(TASK, task, losses)


def shared_grads(model: MultiTaskModel, batch: Batch, counter: PassCounter) -> GradientBundle:
    return parameter_grads(model, batch, counter)[0]


def mean_loss_grads(model: MultiTaskModel, batch: Batch, counter: PassCounter) -> tuple[np.ndarray, list[np.ndarray], list[float]]:
    """Gradient of the uniform mean of task losses in a single backward sweep.

    Returns (shared gradient, per-task decoder gradients, per-task losses).
    """
    _check_input(model, batch)
    tape = Tape()
    z = run_layers(model.encoder, batch.inputs, tape, "enc")
    counter.enc_fwd += 1
    total, losses = None, []
    for t, (dec, kind, y) in enumerate(zip(model.decoders, model.loss_kinds, batch.labels)):
        loss = task_loss(kind, run_layers(dec, z, tape, f"dec{t}"), y, tape)
        losses.append(loss.item())
        total = loss if total is None else tn.add(total, loss, tape)
    counter.dec_fwd += model.n_tasks
    total = tn.scale(total, 1.0 / model.n_tasks, tape)
    g = tn.backward(tape, tape.node_of(total))
    counter.enc_bwd += 1
    counter.dec_bwd += model.n_tasks
    task = [_gather(g, f"dec{t}", dec) for t, dec in enumerate(model.decoders)]
    return _gather(g, "enc", model.encoder), task, losses


def encoder_vjp(model: MultiTaskModel, latent: LatentBatch, cotangent, counter: PassCounter) -> np.ndarray:
    """``(dz/dtheta_sh)^T cotangent`` by one backward sweep of the encoder tape."""
    _check_fresh(model, latent)
    ct = np.asarray(cotangent, dtype=np.float64).ravel()
    if ct.size != latent.z.data.size:
        raise ShapeError(f"cotangent length {ct.size} != n*d_z = {latent.z.data.size}")
    g = tn.vjp(latent.tape, latent.node, ct.reshape(latent.z.shape))
    counter.enc_bwd += 1
    return _gather(g, "enc", model.encoder)


def apply_step(model: MultiTaskModel, space, vector, eta: float) -> MultiTaskModel:
    """In-place ``params <- params - eta * vector`` on one parameter block.

    ``space`` is ``"shared"``, ``"latent-induced-shared"`` (a vector already
    pulled back through :func:`encoder_vjp`) or an integer task index.
    """
    vector = np.asarray(vector, dtype=np.float64).ravel()
    if space in ("shared", SHARED, "latent-induced-shared"):
        if vector.size != model.shared_size:
            raise ShapeError(f"vector length {vector.size} != shared size {model.shared_size}")
        if eta != 0.0:
            model.encoder = unflatten(model.encoder, flatten(model.encoder) - eta * vector)
            model.version += 1
    elif isinstance(space, (int, np.integer)) and 0 <= space < model.n_tasks:
        dec = model.decoders[space]
        if vector.size != model.task_size(space):
            raise ShapeError(f"vector length {vector.size} != task {space} size {model.task_size(space)}")
        if eta != 0.0 and dec:
            model.decoders[space] = unflatten(dec, flatten(dec) - eta * vector)
    else:
        raise InputError(f"unknown parameter space {space!r}")
    return model


def stepped_decoders(model: MultiTaskModel, task_grads: Sequence[np.ndarray], eta: float) -> list[list[Layer]]:
    """Candidate decoders ``theta_t - eta * grad_t`` without touching the model."""
    return [unflatten(dec, flatten(dec) - eta * g) if dec else [] for dec, g in zip(model.decoders, task_grads)]


def predict(model: MultiTaskModel, inputs) -> list[np.ndarray]:
    z = forward_latent(model, inputs)
    return [run_layers(dec, z).numpy() for dec in model.decoders]
