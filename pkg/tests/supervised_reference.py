"""Plain supervised cross-entropy training with hand-written backprop.

Shares nothing with the package except the initial weights and the visiting
order it is given, so it serves as an independent reference for training
on singleton bags.
"""

import numpy as np


def _forward(weights, biases, X):
    acts = [X]
    h = X
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W.T
        if b is not None:
            h = h + b
        if i < len(weights) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    m = h.max(axis=1, keepdims=True)
    logp = h - (m + np.log(np.exp(h - m).sum(axis=1, keepdims=True)))
    return acts, logp


def ce_loss_and_grads(weights, biases, X, y):
    acts, logp = _forward(weights, biases, X)
    B = X.shape[0]
    loss = -logp[np.arange(B), y].mean()
    delta = np.exp(logp)
    delta[np.arange(B), y] -= 1.0
    delta /= B
    gW, gb = [None] * len(weights), [None] * len(weights)
    for i in reversed(range(len(weights))):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0) if biases[i] is not None else None
        if i > 0:
            delta = (delta @ weights[i]) * (acts[i] > 0)
    return loss, gW, gb


def train_supervised(weights, biases, X, y, orders, batch, lr, momentum, wd, lr_drop_epoch):
    """Heavy-ball SGD; returns the mean batch loss of every epoch."""
    weights = [w.copy() for w in weights]
    biases = [None if b is None else b.copy() for b in biases]
    vW = [np.zeros_like(w) for w in weights]
    vb = [None if b is None else np.zeros_like(b) for b in biases]
    history = []
    for epoch, order in enumerate(orders):
        rate = lr / 10 if epoch >= lr_drop_epoch else lr
        losses = []
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            loss, gW, gb = ce_loss_and_grads(weights, biases, X[idx], y[idx])
            losses.append(loss)
            for i in range(len(weights)):
                vW[i] = momentum * vW[i] + (gW[i] + wd * weights[i])
                weights[i] = weights[i] - rate * vW[i]
                if biases[i] is not None:
                    vb[i] = momentum * vb[i] + (gb[i] + wd * biases[i])
                    biases[i] = biases[i] - rate * vb[i]
        history.append(float(np.mean(losses)))
    return history, weights, biases
