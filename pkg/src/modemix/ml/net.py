"""Minimal feed-forward network machinery shared by the softmax classifier
and the averaging gate.

Networks are tanh-hidden, linear-output. ``repetitions`` (or gate restarts)
are trained in lockstep on a leading stack axis K: weights are (K, fan_in,
fan_out), so one batched matmul advances every repetition at once while each
repetition keeps its own RNG stream, initial weights and shuffling order.

The L2 penalty applies to weight matrices only (not biases), scaled by the
current batch size, so the per-batch objective is
mean NLL + l2 / (2 * batch) * sum ||W||^2.
"""

from __future__ import annotations

import numpy as np

from ..errors import TrainingError
from ..rngs import substream


def rep_streams(base_seed: int, n_reps: int) -> list:
    """One generator per repetition, derived from (base_seed, index)."""
    return [substream(base_seed, "rep", k) for k in range(n_reps)]


class StackedNet:
    """K same-shaped MLPs advanced together along a stack axis."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, layer_dims, rngs) -> "StackedNet":
        """Seeded uniform init scaled by 1/sqrt(fan_in); zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            scale = 1.0 / np.sqrt(fan_in)
            w = np.stack([rng.uniform(-scale, scale, (fan_in, fan_out)) for rng in rngs])
            weights.append(w)
            biases.append(np.zeros((len(rngs), fan_out)))
        return cls(weights, biases)

    @property
    def n_reps(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_dims(self) -> tuple:
        return tuple([self.weights[0].shape[1]] + [w.shape[2] for w in self.weights])

    def forward(self, x: np.ndarray) -> list:
        """x is (K, B, fan_in); returns activations per layer, logits last."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = np.matmul(h, w) + b[:, None, :]
            h = z if i == last else np.tanh(z)
            acts.append(h)
        return acts

    def backward(self, acts: list, dlogits: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(logits)."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = np.matmul(acts[i].transpose(0, 2, 1), delta)
            grads_b[i] = delta.sum(axis=1)
            if i > 0:
                delta = np.matmul(delta, self.weights[i].transpose(0, 2, 1))
                delta = delta * (1.0 - acts[i] ** 2)  # tanh'
        return grads_w, grads_b

    def slice(self, k: int) -> "StackedNet":
        return StackedNet([w[k : k + 1] for w in self.weights],
                          [b[k : k + 1] for b in self.biases])

    def to_jsonable(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "StackedNet":
        return cls([np.asarray(w) for w in d["weights"]],
                   [np.asarray(b) for b in d["biases"]])


class Adam:
    """Adaptive-moment updates over the stacked parameter tensors."""

    def __init__(self, net: StackedNet, lr: float, l2: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.l2 = l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in net.weights]
        self.v_w = [np.zeros_like(w) for w in net.weights]
        self.m_b = [np.zeros_like(b) for b in net.biases]
        self.v_b = [np.zeros_like(b) for b in net.biases]

    def step(self, grads_w, grads_b, batch_size: int):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for i, w in enumerate(self.net.weights):
            g = grads_w[i] + (self.l2 / batch_size) * w
            self.m_w[i] = b1 * self.m_w[i] + (1 - b1) * g
            self.v_w[i] = b2 * self.v_w[i] + (1 - b2) * g * g
            w -= self.lr * (self.m_w[i] / corr1) / (np.sqrt(self.v_w[i] / corr2) + self.eps)
        for i, b in enumerate(self.net.biases):
            g = grads_b[i]
            self.m_b[i] = b1 * self.m_b[i] + (1 - b1) * g
            self.v_b[i] = b2 * self.v_b[i] + (1 - b2) * g * g
            b -= self.lr * (self.m_b[i] / corr1) / (np.sqrt(self.v_b[i] / corr2) + self.eps)


def l2_penalty(net: StackedNet, l2: float, batch_size: int) -> np.ndarray:
    """(K,) penalty values matching the per-batch objective."""
    total = np.zeros(net.n_reps)
    for w in net.weights:
        total += (w**2).sum(axis=(1, 2))
    return 0.5 * l2 * total / batch_size


def sgd_train(
    net: StackedNet,
    inputs: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    l2: float,
    rngs: list,
    loss_grad_fn,
    what: str = "network",
    raise_on_divergence: bool = True,
) -> np.ndarray:
    """Mini-batch Adam over all stacked repetitions.

    ``loss_grad_fn(logits, row_idx)`` receives (K, B, out) logits and the
    (K, B) row indices of the batch and returns per-repetition mean losses
    (K,) and d(mean loss)/d(logits). Returns the final epoch's mean training
    loss per repetition (data term plus L2 penalty).

    A non-finite loss raises :class:`TrainingError` unless
    ``raise_on_divergence`` is off, in which case the NaNs stay confined to
    the diverged repetitions' slices and the caller filters them out.
    """
    n = inputs.shape[0]
    k = net.n_reps
    opt = Adam(net, lr=lr, l2=l2)
    batch_size = min(batch_size, n)
    n_batches = (n + batch_size - 1) // batch_size
    epoch_loss = np.zeros(k)
    for epoch in range(epochs):
        perms = np.stack([rng.permutation(n) for rng in rngs])
        epoch_loss[:] = 0.0
        for b in range(n_batches):
            idx = perms[:, b * batch_size : (b + 1) * batch_size]
            xb = inputs[idx]  # (K, B, F)
            acts = net.forward(xb)
            losses, dlogits = loss_grad_fn(acts[-1], idx)
            grads_w, grads_b = net.backward(acts, dlogits)
            opt.step(grads_w, grads_b, idx.shape[1])
            epoch_loss += (losses + l2_penalty(net, l2, idx.shape[1])) * idx.shape[1]
        epoch_loss /= n
        if raise_on_divergence and not np.all(np.isfinite(epoch_loss)):
            bad = np.flatnonzero(~np.isfinite(epoch_loss))
            raise TrainingError(
                f"{what} training diverged at epoch {epoch} for repetitions {bad.tolist()}"
            )
    return epoch_loss
