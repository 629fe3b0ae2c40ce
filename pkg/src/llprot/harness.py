"""Synthetic data, CSV ingestion, bag-size sweeps and the loss self-check."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses
from .bags import LabeledDataset, make_bags
from .losses import (
    GradMode,
    LossKind,
    PredictionMatrix,
    RotConfig,
    avg_instance_kl,
    kl_loss,
    rot_loss,
    rot_loss_gradient,
    sinkhorn_residual,
)
from .model import ModelSpec
from .numerics import one_hot
from .oracles import comb_loss_binary, comb_loss_exact, relax_lp_loss_exact
from .trainer import TrainConfig, evaluate, train


@dataclass(frozen=True)
class BlobSpec:
    """Gaussian class clusters around centers drawn in ``[-center_scale, center_scale]^dim``."""

    num_classes: int = 3
    per_class: int = 250
    dim: int = 10
    spread: float = 1.0
    center_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.per_class < 1 or self.dim < 1:
            raise ValueError("num_classes, per_class and dim must be positive")
        if self.spread < 0:
            raise ValueError("spread must be nonnegative")


def gen_blobs(spec: BlobSpec) -> LabeledDataset:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    centers = rng.uniform(-spec.center_scale, spec.center_scale, size=(spec.num_classes, spec.dim))
    noise = rng.standard_normal((spec.num_classes, spec.per_class, spec.dim))
    feats = (centers[:, None, :] + spec.spread * noise).reshape(-1, spec.dim)
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    return LabeledDataset(feats, labels, spec.num_classes)


def export_csv(ds: LabeledDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path, num_classes=None) -> LabeledDataset:
    """Read ``f0..f{d-1},label`` rows; ``K`` is ``max(label) + 1`` unless given."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise ValueError(f"{path}: missing column 'label'")
        label_col = header.index("label")
        feat_cols = sorted((h for h in header if h != "label"), key=lambda h: (len(h), h))
        expected = [f"f{i}" for i in range(len(feat_cols))]
        if feat_cols != expected:
            raise ValueError(f"{path}: feature columns must be named f0..f{len(feat_cols) - 1}")
        order = [header.index(c) for c in expected]
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(row[i]) for i in order])
                label = int(row[label_col])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if label < 0:
                raise ValueError(f"{path}:{lineno}: negative label")
            labels.append(label)
    if not labels:
        raise ValueError(f"{path}: no data rows")
    labels = np.asarray(labels)
    K = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    missing = sorted(set(range(K)) - set(labels.tolist()))
    if missing:
        warnings.warn(f"{path}: labels are not contiguous, classes {missing} never occur",
                      stacklevel=2)
    return LabeledDataset(np.asarray(feats, dtype=np.float64).reshape(len(labels), -1), labels, K)


def train_test_split(ds: LabeledDataset, seed, train_fraction=0.8):
    """Seeded split; the first ``floor(N * train_fraction)`` permuted indices are for training."""
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2]))).permutation(len(ds))
    n_train = int(math.floor(len(ds) * train_fraction + 1e-9))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


DEFAULT_BAG_SIZES = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
SWEEP_COLUMNS = ("loss", "bag_size", "alpha", "epsilon", "seed", "final_train_loss",
                 "test_accuracy", "seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    """A grid of (loss, bag size) training runs on one dataset.

    ``batch_instances``, when set, overrides ``train.bags_per_batch`` with
    ``max(1, batch_instances // bag_size)`` so every cell sees batches of a
    similar number of instances.
    """

    blobs: BlobSpec | None = field(default_factory=BlobSpec)
    csv_path: str | None = None
    bag_sizes: tuple = DEFAULT_BAG_SIZES
    losses: tuple = (LossKind.KL, LossKind.ROT, LossKind.AVGKL)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    batch_instances: int | None = 32
    seed: int = 0
    out_dir: str | None = None
    record_time: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not self.bag_sizes or any(int(b) < 1 for b in self.bag_sizes):
            raise ValueError("bag_sizes must be a nonempty list of positive sizes")
        if (self.blobs is None) == (self.csv_path is None):
            raise ValueError("give exactly one dataset source (blobs or csv_path)")
        object.__setattr__(self, "losses", tuple(LossKind(k) for k in self.losses))

    def dataset(self):
        return gen_blobs(self.blobs) if self.blobs is not None else load_csv(self.csv_path)


def cell_seed(seed, loss, bag_size):
    """Seed of one sweep cell, derived from the experiment seed, loss and bag size."""
    idx = list(LossKind).index(LossKind(loss))
    state = np.random.SeedSequence([seed, idx, bag_size]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def bag_seed(seed, bag_size):
    """Seed of the bag partition; shared by all losses so cells are paired."""
    state = np.random.SeedSequence([seed, len(LossKind), bag_size]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def run_cell(cfg: ExperimentConfig, train_ds, test_ds, loss, bag_size):
    """Train one (loss, bag size) cell; returns a sweep row dict."""
    seed = cell_seed(cfg.seed, loss, bag_size)
    tcfg = replace(cfg.train, loss_kind=loss, seed=seed)
    if cfg.batch_instances:
        tcfg = replace(tcfg, bags_per_batch=max(1, cfg.batch_instances // bag_size))
    row = {"loss": LossKind(loss).value, "bag_size": bag_size, "alpha": tcfg.rot.alpha,
           "epsilon": tcfg.rot.epsilon, "seed": seed}
    t0 = time.perf_counter()
    try:
        bags = make_bags(train_ds, bag_size, bag_seed(cfg.seed, bag_size))
        params, hist = train(bags, cfg.model, tcfg)
        row["final_train_loss"] = hist.losses[-1] if len(hist) else float("nan")
        row["test_accuracy"] = evaluate(params, test_ds)[0]
        row["error"] = None
    except (ArithmeticError, ValueError) as exc:
        row["final_train_loss"] = float("nan")
        row["test_accuracy"] = float("nan")
        row["error"] = str(exc)
    row["seconds"] = time.perf_counter() - t0
    return row


def _run_cell_star(args):
    return run_cell(*args)


def _format_row(row, record_time):
    out = []
    for col in SWEEP_COLUMNS:
        v = row[col]
        if col == "seconds" and not record_time:
            v = 0.0
        out.append(repr(float(v)) if isinstance(v, float) else str(v))
    return out


def sweep(cfg: ExperimentConfig, csv_path=None):
    """Run every (loss, bag size) cell and return the rows.

    Rows are written to ``csv_path`` (or ``out_dir/sweep.csv``) in grid
    order, each flushed as soon as it is available. Failed cells are kept
    as rows with ``nan`` metrics.
    """
    data = cfg.dataset()
    train_ds, test_ds = train_test_split(data, cfg.seed)
    if csv_path is None and cfg.out_dir is not None:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        csv_path = Path(cfg.out_dir) / "sweep.csv"
    grid = [(cfg, train_ds, test_ds, loss, int(b)) for loss in cfg.losses for b in cfg.bag_sizes]

    fh = writer = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        fh.flush()
    rows = []
    try:
        if cfg.jobs > 1:
            pool = ProcessPoolExecutor(cfg.jobs)
            results = pool.map(_run_cell_star, grid)
        else:
            pool = None
            results = map(_run_cell_star, grid)
        for row in results:
            rows.append(row)
            if writer is not None:
                writer.writerow(_format_row(row, cfg.record_time))
                fh.flush()
        if pool is not None:
            pool.shutdown()
    finally:
        if fh is not None:
            fh.close()
    return rows


# -- loss self-check -------------------------------------------------------

LOSSCHECK_SCHEMA = {
    "type": "object",
    "required": ["checks", "passed"],
    "additionalProperties": False,
    "properties": {
        "passed": {"type": "boolean"},
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "status", "max_error", "tolerance", "seed"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "status": {"enum": ["pass", "fail"]},
                    "max_error": {"type": ["number", "null"]},
                    "tolerance": {"type": "number"},
                    "seed": {"type": "integer"},
                },
            },
        },
    },
}


def random_prediction(rng, K, n, scale=1.0):
    return PredictionMatrix.from_logits(scale * rng.standard_normal((K, n)))


def random_counts_z(rng, K, n):
    """Proportions of a random assignment, so ``n z`` is integral."""
    return np.bincount(rng.integers(0, K, size=n), minlength=K) / n


def separated_instance(rng, K, n, confidence=0.9):
    """Columns put ``confidence`` on a hidden label; ``z`` is that labeling's proportions."""
    t = rng.integers(0, K, size=n)
    probs = np.full((K, n), (1.0 - confidence) / (K - 1))
    probs[t, np.arange(n)] = confidence
    return PredictionMatrix.from_probs(probs), np.bincount(t, minlength=K) / n, t


def _check(name, errors, tol, seed):
    worst = max(errors) if errors else 0.0
    ok = bool(np.isfinite(worst) and worst < tol)
    return {"name": name, "status": "pass" if ok else "fail",
            "max_error": float(worst) if np.isfinite(worst) else None,
            "tolerance": tol, "seed": seed}


def _fd_logits_grad(F_logits, z, cfg, step=1e-5):
    """Central differences of the ROT loss w.r.t. logits."""
    g = np.zeros_like(F_logits)
    for idx in np.ndindex(F_logits.shape):
        vals = []
        for s in (1.0, -1.0):
            L = F_logits.copy()
            L[idx] += s * step
            vals.append(rot_loss(PredictionMatrix.from_logits(L), z, cfg)[0])
        g[idx] = (vals[0] - vals[1]) / (2 * step)
    return g


def _logit_grad(F: PredictionMatrix, g_logf):
    """Chain a ``log F`` gradient through a column log-softmax."""
    return g_logf - F.probs * g_logf.sum(axis=0, keepdims=True)


def losscheck(seed=0, inject_fault=None):
    """Run the cross-module property suite on seeded random instances.

    ``inject_fault="tau_sign"`` flips the sign of the damping exponent in
    the solver (not in the residual check) to confirm the suite notices.
    """
    if inject_fault is not None:
        losses._FAULTS.add(inject_fault)
    try:
        checks = _run_checks(seed)
    finally:
        losses._FAULTS.clear()
    return {"checks": checks, "passed": all(c["status"] == "pass" for c in checks)}


def _guarded(fn):
    try:
        return fn()
    except ArithmeticError:
        return [math.inf]


def _run_checks(seed):
    checks = []
    rng = np.random.default_rng(seed)

    errs = []
    for _ in range(100):
        n = int(rng.integers(1, 11))
        F = random_prediction(rng, 2, n)
        z = random_counts_z(rng, 2, n)
        alpha = float(rng.choice([0.0, 0.3, 0.7, 1.0]))
        d = str(rng.choice(["indicator", "l2", "kl"]))
        a = comb_loss_binary(F, z, alpha, d)[0]
        b = comb_loss_exact(F, z, alpha, d)[0]
        errs.append(0.0 if a == b else abs(a - b))
    checks.append(_check("binary_sort_equals_enumeration", errs, 1e-12, seed))

    errs = []
    for _ in range(50):
        K, n = int(rng.integers(2, 4)), int(rng.integers(1, 7))
        F = random_prediction(rng, K, n)
        z = random_counts_z(rng, K, n)
        v_lp, plan = relax_lp_loss_exact(F, z)
        v_comb = comb_loss_exact(F, z, 1.0, "indicator")[0]
        vals = plan.values
        binary = np.all((vals == 0) | (vals == 1))
        errs.append(abs(v_lp - v_comb) if binary else math.inf)
    checks.append(_check("lp_relaxation_tight", errs, 1e-12, seed))

    def prop1():
        out = []
        for _ in range(50):
            K, n = int(rng.integers(2, 6)), int(rng.integers(1, 17))
            F = random_prediction(rng, K, n)
            z = rng.dirichlet(np.ones(K))
            cfg = RotConfig(alpha=0.5, epsilon=1.0)
            _, U = rot_loss(F, z, cfg)
            ra, rb = sinkhorn_residual(U, F, z, cfg)
            col = np.abs(U.values.sum(axis=0) - 1.0).max()
            out.append(max(ra, rb, col))
        return out
    checks.append(_check("fixed_point_residual", _guarded(prop1), 1e-8, seed))

    def prop2():
        out = []
        for _ in range(50):
            K = int(rng.integers(2, 6))
            logits = rng.standard_normal((K, 1))
            F = PredictionMatrix.from_logits(logits)
            c = int(rng.integers(0, K))
            z = one_hot(c, K)
            alpha = float(rng.uniform(0.05, 0.95))
            cfg = RotConfig(alpha=alpha, epsilon=1.0)
            v, _ = rot_loss(F, z, cfg)
            out.append(abs(v + alpha * cfg.epsilon - alpha * kl_loss(F, z)))
            g = _logit_grad(F, rot_loss_gradient(F, z, cfg))
            out.append(np.abs(g[:, 0] - alpha * (F.probs[:, 0] - z)).max())
        return out
    checks.append(_check("singleton_reduces_to_cross_entropy", _guarded(prop2), 1e-9, seed))

    def unrolled():
        out = []
        for _ in range(5):
            logits = rng.standard_normal((3, 4))
            F = PredictionMatrix.from_logits(logits)
            z = rng.dirichlet(np.ones(3))
            cfg = RotConfig(alpha=0.5, epsilon=1.0)
            g = _logit_grad(F, rot_loss_gradient(F, z, cfg))
            out.append(np.abs(g - _fd_logits_grad(logits, z, cfg)).max())
        return out
    checks.append(_check("unrolled_gradient_finite_differences", _guarded(unrolled), 1e-4, seed))

    def envelope():
        out = []
        for _ in range(10):
            K, n = int(rng.integers(2, 5)), int(rng.integers(1, 7))
            F = random_prediction(rng, K, n)
            z = rng.dirichlet(np.ones(K))
            cfg = RotConfig(alpha=0.5, epsilon=1.0, n_iter=300)
            env = rot_loss_gradient(F, z, replace(cfg, grad_mode=GradMode.ENVELOPE))
            out.append(np.abs(env - rot_loss_gradient(F, z, cfg)).max())
        return out
    checks.append(_check("envelope_matches_unrolled_at_convergence", _guarded(envelope), 1e-3, seed))

    errs = []
    for _ in range(100):
        K, n = int(rng.integers(2, 6)), int(rng.integers(1, 9))
        F = random_prediction(rng, K, n, scale=2.0)
        z = rng.dirichlet(np.ones(K))
        errs.append(max(0.0, kl_loss(F, z) - avg_instance_kl(F, z)))
    checks.append(_check("kl_below_avg_instance_kl", errs, 1e-12, seed))

    def eps_limit():
        out = []
        for _ in range(10):
            K, n = int(rng.integers(2, 4)), int(rng.integers(1, 7))
            F, z, _ = separated_instance(rng, K, n)
            lp = relax_lp_loss_exact(F, z)[0]
            v = rot_loss(F, z, RotConfig(alpha=0.999, epsilon=0.01, n_iter=2000))[0]
            out.append(abs(v - lp) / (1.0 + abs(lp)))
        return out
    checks.append(_check("small_epsilon_approaches_lp", _guarded(eps_limit), 0.05, seed))

    return checks
