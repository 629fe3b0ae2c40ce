"""A small reverse-mode differentiation tape over numpy arrays.

Every value lives in a numbered slot. Leaves are constants or parameters;
each recorded op names a primitive from ``PRIMITIVES``, its input slots,
its output slot and static attributes. ``Tape.replay`` recomputes all op
outputs from the leaves and ``Tape.backward`` walks the ops in reverse.

Array primitives broadcast over leading (batch) axes, so one tape can hold
a whole mini-batch of equally sized bags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import logsumexp, softmax_from_log


@dataclass(frozen=True)
class Op:
    prim: str
    inputs: tuple
    output: int
    attrs: dict = field(default_factory=dict)


class Primitive:
    __slots__ = ("fwd", "vjp")

    def __init__(self, fwd, vjp):
        self.fwd = fwd
        self.vjp = vjp


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.fwd, cls.vjp)
        return cls
    return register


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _masked_mul(mask, a, b):
    """``a * b`` where ``mask`` holds, 0 elsewhere (keeps 0 * inf out)."""
    with np.errstate(invalid="ignore", over="ignore"):
        return np.where(mask, a * b, 0.0)


# -- generic arithmetic ----------------------------------------------------

@primitive("add")
class _Add:
    def fwd(a, b):
        return a + b

    def vjp(g, out, a, b):
        return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


@primitive("sub")
class _Sub:
    def fwd(a, b):
        return a - b

    def vjp(g, out, a, b):
        return _unbroadcast(g, np.shape(a)), -_unbroadcast(g, np.shape(b))


@primitive("scale")
class _Scale:
    def fwd(a, c):
        return c * a

    def vjp(g, out, a, c):
        return (c * g,)


@primitive("add_const")
class _AddConst:
    def fwd(a, c):
        return a + c

    def vjp(g, out, a, c):
        return (g,)


@primitive("floor")
class _Floor:
    """``max(a, c)``; gradient is cut where the floor is active."""

    def fwd(a, c):
        return np.maximum(a, c)

    def vjp(g, out, a, c):
        return (np.where(a >= c, g, 0.0),)


@primitive("sum")
class _Sum:
    def fwd(a):
        return np.sum(a)

    def vjp(g, out, a):
        return (np.broadcast_to(g, np.shape(a)).copy(),)


@primitive("mean")
class _Mean:
    def fwd(a):
        return np.mean(a)

    def vjp(g, out, a):
        return (np.full(np.shape(a), g / np.size(a)),)


# -- network layers --------------------------------------------------------

@primitive("matmul")
class _MatMul:
    def fwd(w, x):
        return w @ x

    def vjp(g, out, w, x):
        return g @ x.T, w.T @ g


@primitive("add_bias")
class _AddBias:
    """Column-broadcast bias: ``(d, n) + (d,)``."""

    def fwd(y, b):
        return y + b[:, None]

    def vjp(g, out, y, b):
        return g, g.sum(axis=1)


@primitive("relu")
class _Relu:
    def fwd(x):
        return np.maximum(x, 0.0)

    def vjp(g, out, x):
        return (np.where(x > 0, g, 0.0),)


@primitive("tanh")
class _Tanh:
    def fwd(x):
        return np.tanh(x)

    def vjp(g, out, x):
        return (g * (1.0 - out * out),)


@primitive("log_softmax")
class _LogSoftmax:
    def fwd(x, axis):
        return x - logsumexp(x, axis=axis, keepdims=True)

    def vjp(g, out, x, axis):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


@primitive("bagify")
class _Bagify:
    """``(K, B*n)`` columns -> ``(B, K, n)`` stack of consecutive bags."""

    def fwd(y, num_bags):
        k, total = y.shape
        return y.reshape(k, num_bags, total // num_bags).transpose(1, 0, 2).copy()

    def vjp(g, out, y, num_bags):
        return (g.transpose(1, 0, 2).reshape(y.shape),)


# -- log-domain reductions -------------------------------------------------

@primitive("logsumexp")
class _LogSumExp:
    def fwd(x, axis):
        return np.asarray(logsumexp(x, axis=axis))

    def vjp(g, out, x, axis):
        return (np.expand_dims(g, axis) * softmax_from_log(x, axis=axis),)


@primitive("wsum")
class _WeightedSum:
    """``sum(w * x)`` over the trailing ``naxes`` axes; ``w == 0`` terms vanish.

    ``w`` is a constant broadcastable against ``x``.
    """

    def fwd(x, w, naxes):
        return _masked_mul(w != 0, w, x).sum(axis=tuple(range(-naxes, 0)))

    def vjp(g, out, x, w, naxes):
        g = np.reshape(g, np.shape(g) + (1,) * naxes)
        return (np.broadcast_to(g * w, np.shape(x)).copy(),)


@primitive("mass_dot")
class _MassDot:
    """``sum_ij exp(logu) * v`` per leading index, with ``0 * v := 0``."""

    def fwd(logu, v):
        u = np.exp(logu)
        return _masked_mul(u > 0, u, v).sum(axis=(-2, -1))

    def vjp(g, out, logu, v):
        u = np.exp(logu)
        g = np.asarray(g)[..., None, None]
        gu = _masked_mul(u > 0, g * u, v)
        return gu, np.broadcast_to(g * u, np.shape(v)).copy()


@primitive("gen_kl")
class _GenKL:
    """Generalized KL ``sum_i p log(p/q) - p + q`` from ``log p`` and ``log q``.

    Terms with ``p = 0`` contribute ``q``; terms with ``p = q = 0`` vanish.
    """

    def fwd(logp, logq):
        p, q = np.exp(logp), np.exp(logq)
        with np.errstate(invalid="ignore"):
            terms = np.where(p > 0, p * (logp - logq), 0.0) - p + q
        return terms.sum(axis=-1)

    def vjp(g, out, logp, logq):
        p, q = np.exp(logp), np.exp(logq)
        g = np.asarray(g)[..., None]
        with np.errstate(invalid="ignore"):
            gp = np.where(p > 0, g * p * (logp - logq), 0.0)
        return _unbroadcast(gp, logp.shape), _unbroadcast(g * (q - p), logq.shape)


# -- Sinkhorn iterates -----------------------------------------------------

@primitive("sinkhorn_a")
class _SinkhornA:
    """``log a = tau * (log(n z) - log(K b))`` with row reductions in log domain.

    ``logk`` is ``(..., K, n)``, ``logb`` is ``(..., n)``, ``lognz`` is
    ``(..., K)``. Rows with ``n z_i = 0`` stay at ``-inf``.
    """

    def fwd(logk, logb, lognz, tau):
        lkb = np.asarray(logsumexp(logk + logb[..., None, :], axis=-1))
        with np.errstate(invalid="ignore"):
            out = tau * (lognz - lkb)
        return np.where(np.isneginf(lognz), -np.inf, out)

    def vjp(g, out, logk, logb, lognz, tau):
        p = softmax_from_log(logk + logb[..., None, :], axis=-1)
        g = np.where(np.isneginf(lognz), 0.0, g)
        gk = -tau * g[..., :, None] * p
        return gk, gk.sum(axis=-2)


@primitive("sinkhorn_b")
class _SinkhornB:
    """``log b = -log(K^T a)``; ``logk`` ``(..., K, n)``, ``loga`` ``(..., K)``."""

    def fwd(logk, loga):
        return -np.asarray(logsumexp(logk + loga[..., :, None], axis=-2))

    def vjp(g, out, logk, loga):
        q = softmax_from_log(logk + loga[..., :, None], axis=-2)
        gk = -g[..., None, :] * q
        return gk, gk.sum(axis=-1)


@primitive("plan_log")
class _PlanLog:
    """``log U = log a (+) log K (+) log b`` (outer sums)."""

    def fwd(loga, logk, logb):
        return loga[..., :, None] + logk + logb[..., None, :]

    def vjp(g, out, loga, logk, logb):
        g = np.where(np.isneginf(out), 0.0, g)
        return g.sum(axis=-1), g, g.sum(axis=-2)


@primitive("surrogate")
class _Surrogate:
    """Report a precomputed value and pass back a fixed gradient.

    Used for gradients obtained outside the tape (envelope gradients).
    """

    def fwd(x, value, grad):
        return np.asarray(value, dtype=np.float64)

    def vjp(g, out, x, value, grad):
        g = np.reshape(g, np.shape(g) + (1,) * (np.ndim(grad) - np.ndim(g)))
        return (g * grad,)


class Tape:
    """Ordered record of primitive applications.

    Slots hold numpy arrays. ``inputs`` of an op may mix slot ids and are
    resolved in order; static attributes go in ``attrs`` and are passed as
    keyword arguments after the array inputs.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[Op] = []
        self.leaf_slots: list[int] = []
        self.param_slots: list = []
        self.output: int | None = None

    def __len__(self):
        return len(self.ops)

    def _new(self, value):
        self.values.append(value)
        return len(self.values) - 1

    def const(self, value):
        slot = self._new(np.asarray(value, dtype=np.float64))
        self.leaf_slots.append(slot)
        return slot

    def apply(self, prim, *inputs, **attrs):
        fn = PRIMITIVES[prim].fwd
        value = fn(*(self.values[i] for i in inputs), **attrs)
        slot = self._new(np.asarray(value, dtype=np.float64))
        self.ops.append(Op(prim, tuple(inputs), slot, attrs))
        return slot

    def __getitem__(self, slot):
        return self.values[slot]

    def replay(self):
        """Recompute every op output from the leaf values."""
        vals = list(self.values)
        for op in self.ops:
            fn = PRIMITIVES[op.prim].fwd
            vals[op.output] = np.asarray(fn(*(vals[i] for i in op.inputs), **op.attrs),
                                         dtype=np.float64)
        return vals

    def backward(self, seed_grad=1.0, output=None):
        """Reverse-mode accumulation from a scalar output slot.

        Returns a list indexed by slot; slots that receive no gradient hold
        ``None``.
        """
        out = self.output if output is None else output
        if out is None or np.ndim(self.values[out]) != 0:
            raise ValueError("tape is not terminated by a scalar loss")
        grads: list = [None] * len(self.values)
        grads[out] = np.asarray(seed_grad, dtype=np.float64)
        for op in reversed(self.ops):
            g = grads[op.output]
            if g is None:
                continue
            ins = [self.values[i] for i in op.inputs]
            contribs = PRIMITIVES[op.prim].vjp(g, self.values[op.output], *ins, **op.attrs)
            for slot, c in zip(op.inputs, contribs):
                if c is None:
                    continue
                grads[slot] = c if grads[slot] is None else grads[slot] + c
        return grads
