"""Empirical risk minimization over bags with SGD, momentum and weight decay."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .bags import BagDataset, LabeledDataset
from .losses import LossKind, RotConfig, loss_node
from .model import ModelSpec, ParamStore, backward, init_params, record_network, save_checkpoint


class TrainingError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``lr_drop_epoch`` defaults to ``epochs // 2``; from that epoch on the
    learning rate is a tenth of ``learning_rate``.
    """

    loss_kind: LossKind = LossKind.KL
    rot: RotConfig = field(default_factory=RotConfig)
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.005
    epochs: int = 100
    lr_drop_epoch: int | None = None
    bags_per_batch: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.lr_drop_epoch is None:
            object.__setattr__(self, "lr_drop_epoch", self.epochs // 2)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 0 or not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ValueError("need 0 <= lr_drop_epoch <= epochs")
        if self.bags_per_batch < 1 or self.workers < 1:
            raise ValueError("bags_per_batch and workers must be at least 1")


@dataclass
class OptState:
    velocity: list

    @classmethod
    def zeros_like(cls, params: ParamStore):
        return cls([np.zeros_like(a) for a in params.arrays()])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    seconds: float
    learning_rate: float
    batch_losses: list = field(default_factory=list)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return [r.train_loss for r in self.records]


def _batch_loss(params, xs_stack, z_stack, kind, rot):
    """Mean loss and gradients for a stack of equally sized bags."""
    num_bags, n, _ = xs_stack.shape
    tape = Tape()
    logp = record_network(tape, params, xs_stack.reshape(num_bags * n, -1).T)
    logf = tape.apply("bagify", logp, num_bags=num_bags)
    per_bag = loss_node(tape, logf, z_stack, kind, rot)
    tape.output = tape.apply("sum", per_bag)
    return tape[per_bag], backward(tape).arrays()


def empirical_risk(params: ParamStore, bag_batch, cfg: TrainConfig):
    """Average loss and parameter gradients over a batch of bags.

    ``bag_batch`` is a sequence of ``(features (n, d), proportions (K,))``.
    Bags of equal size are evaluated together; contributions are reduced in
    batch order so the result does not depend on ``cfg.workers``.
    """
    if not bag_batch:
        raise ValueError("empty batch")
    groups: dict[int, list] = {}
    for i, (xs, _) in enumerate(bag_batch):
        groups.setdefault(len(xs), []).append(i)

    def run(idx):
        xs = np.stack([np.asarray(bag_batch[i][0], dtype=np.float64) for i in idx])
        zs = np.stack([np.asarray(bag_batch[i][1], dtype=np.float64) for i in idx])
        try:
            return _batch_loss(params, xs, zs, cfg.loss_kind, cfg.rot)
        except (ArithmeticError, ValueError) as exc:
            raise type(exc)(f"bag {idx[0]}: {exc}") from exc

    jobs = list(groups.values())
    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(idx) for idx in jobs]

    per_bag = np.empty(len(bag_batch))
    grads = None
    for idx, (losses, g) in zip(jobs, results):
        per_bag[idx] = losses
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    scale = 1.0 / len(bag_batch)
    return float(per_bag.mean()), params.with_arrays([scale * g for g in grads])


def sgd_step(params: ParamStore, grads: ParamStore, state: OptState, lr, momentum, weight_decay):
    """Heavy-ball step with decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * theta)``; ``theta <- theta - lr * v``.
    """
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.velocity):
        raise ValueError("parameter, gradient and state shapes disagree")
    new_params, new_vel = [], []
    for theta, g, v in zip(p_arrays, g_arrays, state.velocity):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ValueError("parameter, gradient and state shapes disagree")
        v = momentum * v + (g + weight_decay * theta)
        new_vel.append(v)
        new_params.append(theta - lr * v)
    return params.with_arrays(new_params), OptState(new_vel)


def epoch_order(seed, epoch, num_bags):
    """Bag visiting order of one epoch (a pure function of seed and epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1, epoch])))
    return rng.permutation(num_bags)


def evaluate(params: ParamStore, ds: LabeledDataset):
    """Accuracy and ``K x K`` confusion matrix (rows: true class, cols: predicted)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    tape = Tape()
    logp = tape[record_network(tape, params, ds.features.T)]
    pred = np.argmax(logp, axis=0)
    K = ds.num_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    return float(np.mean(pred == ds.labels)), confusion


HISTORY_COLUMNS = ("epoch", "train_loss", "test_accuracy", "seconds")


def train(ds: BagDataset, model_spec: ModelSpec | ParamStore, cfg: TrainConfig,
          eval_data: LabeledDataset | None = None, history_csv=None, record_time=True,
          checkpoint_path=None, checkpoint_every=0, augment=None):
    """Train a classifier on fixed bags.

    Each epoch visits the bags in a seeded order, in batches of
    ``cfg.bags_per_batch``, and applies one SGD step per batch.
    ``model_spec`` may also be an initial ``ParamStore``.

    Parameters
    ----------
    eval_data : LabeledDataset, optional
        Scored after every epoch; ``nan`` accuracy is recorded otherwise.
    history_csv : path, optional
        Receives one row per epoch, flushed as it is written.
    record_time : bool
        Write wall-clock seconds to the CSV; when off the column holds 0 so
        that repeated runs produce identical files.
    augment : callable, optional
        Maps a bag's feature matrix to an augmented copy before the forward
        pass; identity by default.
    """
    if isinstance(model_spec, ParamStore):
        params = model_spec.copy()
    else:
        params = init_params(ds.source.dim, ds.num_classes, model_spec, seed=cfg.seed)
    state = OptState.zeros_like(params)
    history = TrainHistory()
    augment = augment or (lambda xs: xs)

    fh = writer = None
    if history_csv is not None:
        fh = open(history_csv, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        fh.flush()
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = cfg.learning_rate / 10.0 if epoch >= cfg.lr_drop_epoch else cfg.learning_rate
            order = epoch_order(cfg.seed, epoch, len(ds))
            batch_losses = []
            for b, start in enumerate(range(0, len(order), cfg.bags_per_batch)):
                chosen = [ds.bags[i] for i in order[start:start + cfg.bags_per_batch]]
                batch = [(augment(ds.features_of(bag)), bag.proportions) for bag in chosen]
                try:
                    loss, grads = empirical_risk(params, batch, cfg)
                except ArithmeticError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
                if not np.isfinite(loss):
                    raise TrainingError(f"epoch {epoch}, batch {b}: non-finite loss {loss}")
                params, state = sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay)
                batch_losses.append(loss)
            acc = evaluate(params, eval_data)[0] if eval_data is not None else float("nan")
            rec = EpochRecord(epoch, float(np.mean(batch_losses)) if batch_losses else float("nan"),
                              acc, time.perf_counter() - t0, lr, batch_losses)
            history.records.append(rec)
            if writer is not None:
                writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.test_accuracy),
                                 repr(rec.seconds if record_time else 0.0)])
                fh.flush()
            if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(params, checkpoint_path)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path)
    return params, history
