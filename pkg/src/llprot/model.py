"""Multilayer perceptron with a log-softmax head, recorded on a tape.

Hidden layers are bias-free by default; the last layer always has a bias.
Instances are processed as columns: a bag of ``n`` feature vectors becomes
a ``d x n`` matrix and produces a ``K x n`` matrix of log-probabilities.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .losses import LossKind, PredictionMatrix, RotConfig, loss_node

ACTIVATIONS = ("relu", "tanh")
_MAGIC = b"LLPW"
_VERSION = 1


@dataclass
class ParamStore:
    """Layer weights ``(d_out, d_in)`` and optional biases ``(d_out,)``."""

    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias entry (possibly None) per layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input size does not match layer {i - 1} output")
        for w, b in zip(self.weights, self.biases):
            if b is not None and b.shape != (w.shape[0],):
                raise ValueError("bias shape does not match layer output")
        if self.biases[-1] is None:
            raise ValueError("the output layer must have a bias")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def num_classes(self):
        return self.weights[-1].shape[0]

    def arrays(self):
        """Parameter arrays in canonical order: W0, b0, W1, b1, ... (None biases skipped)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def with_arrays(self, arrays):
        it = iter(arrays)
        weights, biases = [], []
        for b in self.biases:
            weights.append(np.asarray(next(it), dtype=np.float64))
            biases.append(None if b is None else np.asarray(next(it), dtype=np.float64))
        return ParamStore(weights, biases, self.activation)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def num_params(self):
        return sum(a.size for a in self.arrays())

    def names(self):
        out = []
        for i, b in enumerate(self.biases):
            out.append(f"W{i}")
            if b is not None:
                out.append(f"b{i}")
        return out


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple = (32,)
    activation: str = "relu"
    hidden_bias: bool = False


def init_params(input_dim, num_classes, spec: ModelSpec | None = None, seed=0) -> ParamStore:
    """Uniform init in ``+-sqrt(6 / (d_in + d_out))`` with zero biases."""
    spec = spec or ModelSpec()
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = [input_dim, *spec.hidden, num_classes]
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (d_in + d_out))
        weights.append(rng.uniform(-limit, limit, size=(d_out, d_in)))
        last = i == len(dims) - 2
        biases.append(np.zeros(d_out) if last or spec.hidden_bias else None)
    return ParamStore(weights, biases, spec.activation)


def record_network(tape: Tape, params: ParamStore, x_cols):
    """Record the network on ``tape`` for inputs given as columns; returns the log-prob slot."""
    x_cols = np.asarray(x_cols, dtype=np.float64)
    if x_cols.ndim != 2 or x_cols.shape[0] != params.input_dim:
        raise ValueError(f"expected inputs with {params.input_dim} features, "
                         f"got shape {x_cols.shape[::-1]}")
    h = tape.const(x_cols)
    tape.param_slots = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        ws = tape.const(w)
        bs = tape.const(b) if b is not None else None
        tape.param_slots.append((ws, bs))
        h = tape.apply("matmul", ws, h)
        if bs is not None:
            h = tape.apply("add_bias", h, bs)
        if i < last:
            h = tape.apply(params.activation, h)
    return tape.apply("log_softmax", h, axis=0)


def forward(params: ParamStore, x):
    """Log-probabilities of one instance; returns ``(logp, tape)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single feature vector")
    tape = Tape()
    out = record_network(tape, params, x[:, None])
    tape.output = out
    return tape[out][:, 0].copy(), tape


def forward_bag(params: ParamStore, xs):
    """Prediction matrix of a bag; the tape output is its ``(1, K, n)`` log-probs."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("a bag needs at least one instance")
    tape = Tape()
    logp = record_network(tape, params, xs.T)
    tape.output = tape.apply("bagify", logp, num_bags=1)
    return PredictionMatrix(tape[tape.output][0]), tape


def attach_loss(tape: Tape, z, kind, cfg: RotConfig | None = None):
    """Append the mean bag loss on top of the tape's ``(B, K, n)`` output."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    per_bag = loss_node(tape, tape.output, z, LossKind(kind), cfg or RotConfig())
    tape.output = tape.apply("mean", per_bag)
    return float(tape[tape.output])


def backward(tape: Tape, seed_grad=1.0) -> ParamStore:
    """Parameter gradients of the tape's scalar output, shaped like the parameters."""
    grads = tape.backward(seed_grad)
    weights, biases = [], []
    for ws, bs in tape.param_slots:
        gw = grads[ws]
        weights.append(np.zeros_like(tape[ws]) if gw is None else gw)
        if bs is None:
            biases.append(None)
        else:
            gb = grads[bs]
            biases.append(np.zeros_like(tape[bs]) if gb is None else gb)
    return ParamStore(weights, biases)


def bag_loss(params: ParamStore, xs, z, kind, cfg: RotConfig | None = None):
    """Loss value of one bag (no gradient)."""
    _, tape = forward_bag(params, xs)
    return attach_loss(tape, z, kind, cfg)


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    rows: list = field(default_factory=list)

    @property
    def flagged(self):
        return [r for r in self.rows if r["flagged"]]

    @property
    def passed(self):
        return not self.flagged


def grad_check(params: ParamStore, xs, z, loss_kind, cfg: RotConfig | None = None,
               step=1e-5, tol=1e-4) -> GradCheckReport:
    """Compare tape gradients with central differences on every parameter.

    An entry is flagged when its absolute error exceeds ``tol``.
    """
    cfg = cfg or RotConfig()
    _, tape = forward_bag(params, xs)
    attach_loss(tape, z, loss_kind, cfg)
    analytic = backward(tape).arrays()
    base = [a.copy() for a in params.arrays()]
    rows = []
    for k, (name, arr, grad) in enumerate(zip(params.names(), base, analytic)):
        for idx in np.ndindex(arr.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = [a.copy() for a in base]
                pert[k][idx] += sign * step
                vals.append(bag_loss(params.with_arrays(pert), xs, z, loss_kind, cfg))
            numeric = (vals[0] - vals[1]) / (2 * step)
            a = float(grad[idx])
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), 1e-12)
            rows.append({"param": name, "index": idx, "analytic": a, "numeric": numeric,
                         "abs_error": err, "rel_error": rel, "flagged": err > tol})
    return GradCheckReport(
        max_abs_error=max((r["abs_error"] for r in rows), default=0.0),
        max_rel_error=max((r["rel_error"] for r in rows), default=0.0),
        tolerance=tol,
        rows=rows,
    )


def save_checkpoint(params: ParamStore, path):
    """Binary checkpoint: ``LLPW`` magic, version, layer dims, then little-endian float64 data."""
    header = [_MAGIC, struct.pack("<IIB", _VERSION, len(params.weights),
                                  ACTIVATIONS.index(params.activation))]
    for w, b in zip(params.weights, params.biases):
        header.append(struct.pack("<IIB", w.shape[0], w.shape[1], b is not None))
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    with open(path, "wb") as fh:
        fh.write(b"".join(header + body))


def load_checkpoint(path) -> ParamStore:
    data = open(path, "rb").read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an LLPW checkpoint")
    version, num_layers, act = struct.unpack_from("<IIB", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IIB")
    dims = []
    for _ in range(num_layers):
        dims.append(struct.unpack_from("<IIB", data, off))
        off += struct.calcsize("<IIB")
    weights, biases = [], []
    for d_out, d_in, has_bias in dims:
        count = d_out * d_in
        weights.append(np.frombuffer(data, "<f8", count, off).reshape(d_out, d_in).astype(np.float64))
        off += 8 * count
        if has_bias:
            biases.append(np.frombuffer(data, "<f8", d_out, off).astype(np.float64))
            off += 8 * d_out
        else:
            biases.append(None)
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    return ParamStore(weights, biases, ACTIVATIONS[act])
