"""Bag-level losses: KL, mean-of-instance KL, proportion divergences, ROT.

The ROT loss is the entropic, KL-unbalanced transport relaxation of the
label-guessing objective. Its value is produced by a fixed number of
generalized Sinkhorn iterations run entirely in the log domain::

    log K = log F / eps
    log a <- tau * (log(n z) - LSE_j(log K + log b))
    log b <- -LSE_i(log K + log a)
    U     =  exp(log a + log K + log b)

with ``tau = 1 / (1 + alpha * eps / (1 - alpha))`` (``tau = 0`` when
``alpha = 1``). The iterations are recorded on a :class:`~llprot.autodiff.Tape`
so the loss can be differentiated through every step.

All tape-level builders work on stacks of equally sized bags: ``log F`` has
shape ``(B, K, n)`` and ``z`` has shape ``(B, K)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import kl_div

from .autodiff import Tape
from .numerics import SIMPLEX_TOL, check_log_matrix, check_simplex, logsumexp, safe_log

KL_MEAN_FLOOR = 1e-30

# Mutation switches for the self-check runner; never set in normal use.
_FAULTS: set = set()


class Divergence(str, Enum):
    INDICATOR = "indicator"
    L1 = "l1"
    L2 = "l2"
    KL = "kl"


class GradMode(str, Enum):
    UNROLLED = "unrolled"
    ENVELOPE = "envelope"


class SinkhornDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class RotConfig:
    """Hyperparameters of the ROT loss.

    Defaults follow the reference training protocol (``eps = 1``, 75
    iterations) with ``alpha`` at the middle of the usual grid.
    """

    alpha: float = 0.5
    epsilon: float = 1.0
    n_iter: int = 75
    divergence: Divergence = Divergence.KL
    grad_mode: GradMode = GradMode.UNROLLED

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.n_iter) != self.n_iter or self.n_iter < 1:
            raise ValueError(f"n_iter must be a positive integer, got {self.n_iter}")
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        object.__setattr__(self, "grad_mode", GradMode(self.grad_mode))
        if self.divergence is not Divergence.KL:
            raise ValueError("the ROT loss only supports the generalized KL marginal penalty")
        if self.alpha == 0.0:
            warnings.warn("alpha = 0: the ROT loss reduces to the marginal KL term and the "
                          "envelope gradient vanishes", stacklevel=3)

    @property
    def tau(self):
        if self.alpha == 1.0:
            return 0.0
        return 1.0 / (1.0 + self.alpha * self.epsilon / (1.0 - self.alpha))


@dataclass(frozen=True)
class PredictionMatrix:
    """``K x n`` matrix of per-instance class log-probabilities (one column per instance)."""

    log_values: np.ndarray

    def __post_init__(self):
        lv = check_log_matrix(self.log_values)
        if lv.ndim != 2 or lv.shape[1] < 1:
            raise ValueError(f"prediction matrix must be K x n with n >= 1, got {lv.shape}")
        col = logsumexp(lv, axis=0)
        if np.any(np.abs(col) > SIMPLEX_TOL):
            raise ValueError("prediction columns must be probability vectors")
        lv = lv.copy()
        lv.setflags(write=False)
        object.__setattr__(self, "log_values", lv)

    @classmethod
    def from_probs(cls, probs):
        return cls(safe_log(probs))

    @classmethod
    def from_logits(cls, logits):
        logits = np.asarray(logits, dtype=np.float64)
        return cls(logits - logsumexp(logits, axis=0, keepdims=True))

    @property
    def K(self):
        return self.log_values.shape[0]

    @property
    def n(self):
        return self.log_values.shape[1]

    @property
    def probs(self):
        return np.exp(self.log_values)


@dataclass(frozen=True)
class TransportPlan:
    """Soft assignment matrix with unit column sums.

    ``log_a`` and ``log_b`` hold the final Sinkhorn scalings when the plan
    comes from :func:`rot_loss`; they are ``None`` for oracle plans.
    """

    log_values: np.ndarray
    log_a: np.ndarray | None = None
    log_b: np.ndarray | None = None

    @property
    def values(self):
        return np.exp(self.log_values)

    @property
    def K(self):
        return self.log_values.shape[0]

    @property
    def n(self):
        return self.log_values.shape[1]


def _check_pair(F: PredictionMatrix, z):
    return check_simplex(z, F.K)


def divergence(u, v, kind):
    """Divergence between rows of ``u`` (``(..., K)``) and a target ``v``.

    ``L2`` is the squared Euclidean distance, ``KL`` the generalized
    Kullback-Leibler divergence ``sum u log(u/v) - u + v`` and ``INDICATOR``
    is 0 on (numerical) equality and ``+inf`` otherwise.
    """
    kind = Divergence(kind)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if kind is Divergence.L1:
        return np.abs(u - v).sum(axis=-1)
    if kind is Divergence.L2:
        return ((u - v) ** 2).sum(axis=-1)
    if kind is Divergence.KL:
        return kl_div(u, v).sum(axis=-1)
    equal = np.all(np.abs(u - v) <= 1e-12, axis=-1)
    return np.where(equal, 0.0, np.inf)


# -- tape builders ---------------------------------------------------------

def kl_loss_node(tape: Tape, logf, z):
    """Cross-entropy of ``z`` against the mean prediction of each bag."""
    n = tape[logf].shape[-1]
    mean_log = tape.apply("logsumexp", logf, axis=-1)
    mean_log = tape.apply("add_const", mean_log, c=-math.log(n))
    mean_log = tape.apply("floor", mean_log, c=math.log(KL_MEAN_FLOOR))
    return tape.apply("wsum", mean_log, w=-np.asarray(z, dtype=np.float64), naxes=1)


def avg_kl_node(tape: Tape, logf, z):
    """Mean over instances of the cross-entropy of each column against ``z``."""
    n = tape[logf].shape[-1]
    w = -np.asarray(z, dtype=np.float64)[..., :, None] / n
    return tape.apply("wsum", logf, w=w, naxes=2)


def _check_iterate(value, it):
    if np.any(np.isnan(value)) or np.any(value == np.inf):
        raise SinkhornDiverged(f"sinkhorn diverged at iteration {it}")


def rot_loss_node(tape: Tape, logf, z, cfg: RotConfig):
    """Record the unrolled ROT loss for a stack of bags.

    Returns the loss slot (shape ``(B,)``) and a dict with the slots of the
    final ``log a``, ``log b`` and ``log U``.
    """
    alpha, eps = cfg.alpha, cfg.epsilon
    lf = tape[logf]
    batch, n = lf.shape[:-2], lf.shape[-1]
    z = np.asarray(z, dtype=np.float64)
    logk = tape.apply("scale", logf, c=1.0 / eps)
    logb = tape.const(np.zeros(batch + (n,)))
    tau = cfg.tau
    if "tau_sign" in _FAULTS:
        tau = -tau
    if alpha == 1.0:
        loga = tape.const(np.zeros(z.shape))
    else:
        lognz = tape.const(safe_log(n * z))
    for it in range(1, cfg.n_iter + 1):
        if alpha != 1.0:
            loga = tape.apply("sinkhorn_a", logk, logb, lognz, tau=tau)
            _check_iterate(tape[loga], it)
        logb = tape.apply("sinkhorn_b", logk, loga)
        _check_iterate(tape[logb], it)
    logu = tape.apply("plan_log", loga, logk, logb)
    if np.any(np.isnan(tape[logu])):
        raise SinkhornDiverged(f"sinkhorn diverged at iteration {cfg.n_iter}")

    neg_logf = tape.apply("scale", logf, c=-1.0)
    cost = tape.apply("mass_dot", logu, neg_logf)
    # sum U (log U - 1) = -H(U)
    neg_entropy = tape.apply("mass_dot", logu, tape.apply("add_const", logu, c=-1.0))
    inner = tape.apply("add", cost, tape.apply("scale", neg_entropy, c=eps))
    loss = tape.apply("scale", inner, c=alpha / n)
    if alpha < 1.0:
        logp = tape.apply("logsumexp", logu, axis=-1)
        logp = tape.apply("add_const", logp, c=-math.log(n))
        marg = tape.apply("gen_kl", logp, tape.const(safe_log(z)))
        loss = tape.apply("add", loss, tape.apply("scale", marg, c=1.0 - alpha))
    return loss, {"log_a": loga, "log_b": logb, "log_u": logu}


def rot_envelope_node(tape: Tape, logf, z, cfg: RotConfig):
    """ROT loss whose gradient w.r.t. ``log F`` is ``-alpha U / n`` with ``U`` frozen."""
    scratch = Tape()
    lf = scratch.const(tape[logf])
    loss, slots = rot_loss_node(scratch, lf, z, cfg)
    n = tape[logf].shape[-1]
    grad = (-cfg.alpha / n) * np.exp(scratch[slots["log_u"]])
    return tape.apply("surrogate", logf, value=scratch[loss], grad=grad), scratch, slots


# -- single-bag API --------------------------------------------------------

def kl_loss(F: PredictionMatrix, z) -> float:
    """Bag KL loss ``-sum_i z_i log(mean_j F_ij)``.

    The mean prediction is floored at ``1e-30`` before the log and classes
    with ``z_i = 0`` contribute nothing.
    """
    z = _check_pair(F, z)
    tape = Tape()
    out = kl_loss_node(tape, tape.const(F.log_values[None]), z[None])
    return float(tape[out][0])


def avg_instance_kl(F: PredictionMatrix, z) -> float:
    """Instance-level baseline: average over columns of ``-sum_i z_i log F_ij``."""
    z = _check_pair(F, z)
    tape = Tape()
    out = avg_kl_node(tape, tape.const(F.log_values[None]), z[None])
    return float(tape[out][0])


def prop_loss(F: PredictionMatrix, z, d) -> float:
    """Divergence ``d(z, mean prediction)``.

    With ``d = KL`` this is the generalized KL divergence, i.e. ``kl_loss``
    minus the entropy of ``z``.
    """
    d = Divergence(d)
    if d is Divergence.INDICATOR:
        raise ValueError("the indicator divergence is not usable as a proportion loss")
    z = _check_pair(F, z)
    mean = F.probs.mean(axis=1)
    return float(divergence(z, mean, d))


def rot_loss(F: PredictionMatrix, z, cfg: RotConfig | None = None):
    """ROT loss value and transport plan of one bag.

    Returns
    -------
    value : float
    plan : TransportPlan
        ``U = diag(a) K diag(b)`` after ``cfg.n_iter`` iterations, with the
        final scalings attached.
    """
    cfg = cfg or RotConfig()
    z = _check_pair(F, z)
    tape = Tape()
    loss, slots = rot_loss_node(tape, tape.const(F.log_values[None]), z[None], cfg)
    plan = TransportPlan(tape[slots["log_u"]][0],
                         log_a=tape[slots["log_a"]][0],
                         log_b=tape[slots["log_b"]][0])
    return float(tape[loss][0]), plan


def sinkhorn_residual(U: TransportPlan, F: PredictionMatrix, z, cfg: RotConfig | None = None):
    """Max-norm residuals of the two fixed-point equations, in log domain.

    Returns ``(res_a, res_b)`` for ``a = (n z / K b)^tau`` and
    ``b = 1 / K^T a``. The plan fixes the scalings only up to the gauge
    ``(a e^c, b e^-c)``; the b-equation is gauge invariant, and the
    a-residual is reported at the gauge that minimizes it, which is half the
    spread of the per-row residuals at the stored scalings. Rows with
    ``z_i = 0`` are exact (both sides are ``-inf``) and are skipped.
    """
    cfg = cfg or RotConfig()
    if U.log_a is None or U.log_b is None:
        raise ValueError("plan carries no Sinkhorn scalings")
    z = np.asarray(z, dtype=np.float64)
    logk = (1.0 / cfg.epsilon) * F.log_values
    loga, logb = U.log_a, U.log_b
    if cfg.alpha == 1.0:
        rows = loga
    else:
        rhs = cfg.tau * (safe_log(F.n * z) - logsumexp(logk + logb[None, :], axis=1))
        live = z > 0
        rows = loga[live] - rhs[live]
    # shifting log a by c moves every row residual by (1 - tau) c
    if not rows.size:
        res_a = 0.0
    elif cfg.tau == 1.0:
        res_a = np.abs(rows).max()
    else:
        res_a = 0.5 * (rows.max() - rows.min())
    res_b = np.abs(logb + logsumexp(logk + loga[:, None], axis=0))
    return float(res_a), float(res_b.max())


def rot_loss_gradient(F: PredictionMatrix, z, cfg: RotConfig | None = None):
    """Gradient of the ROT loss with respect to ``log F`` (``K x n``).

    ``ENVELOPE`` returns ``-alpha U / n`` for the computed plan.
    ``UNROLLED`` backpropagates through every Sinkhorn iteration; ``z``
    is treated as data.
    """
    cfg = cfg or RotConfig()
    z = _check_pair(F, z)
    if cfg.grad_mode is GradMode.ENVELOPE:
        _, plan = rot_loss(F, z, cfg)
        return (-cfg.alpha / F.n) * plan.values
    tape = Tape()
    logf = tape.const(F.log_values[None])
    loss, _ = rot_loss_node(tape, logf, z[None], cfg)
    tape.output = tape.apply("sum", loss)
    return tape.backward()[logf][0]


class LossKind(str, Enum):
    KL = "kl"
    ROT = "rot"
    AVGKL = "avgkl"


def loss_node(tape: Tape, logf, z, kind, cfg: RotConfig | None = None):
    """Record per-bag losses of the given kind; returns a ``(B,)`` slot."""
    kind = LossKind(kind)
    if kind is LossKind.KL:
        return kl_loss_node(tape, logf, z)
    if kind is LossKind.AVGKL:
        return avg_kl_node(tape, logf, z)
    cfg = cfg or RotConfig()
    if cfg.grad_mode is GradMode.ENVELOPE:
        return rot_envelope_node(tape, logf, z, cfg)[0]
    return rot_loss_node(tape, logf, z, cfg)[0]
