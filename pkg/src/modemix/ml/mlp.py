"""Feed-forward softmax classifier over encoded features.

Training minimizes the availability-masked mean negative log-likelihood plus
an L2 penalty on the weight matrices, by mini-batch Adam. The configured
number of repetitions trains in one stacked pass (each repetition with its
own seeded init and shuffling); predictions average the repetitions'
probability tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import ChoiceDataset
from ..errors import ConfigError
from .ensembles import ensemble_average
from .features import FeatureTable, encode_features
from .net import StackedNet, rep_streams, sgd_train

NEG_INF = -np.inf


def masked_softmax(logits: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Softmax over available alternatives only; unavailable get exactly 0."""
    z = np.where(avail, logits, NEG_INF)
    m = np.max(z, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - shift)
    return e / e.sum(axis=-1, keepdims=True)


def masked_nll_and_grad(logits: np.ndarray, labels: np.ndarray, avail: np.ndarray):
    """Mean negative log-likelihood over the batch and its logit gradient.

    Shapes: logits (K, B, J); labels (K, B) int; avail (K, B, J) bool.
    """
    k, b, _ = logits.shape
    z = np.where(avail, logits, NEG_INF)
    m = np.max(z, axis=-1)
    lse = m + np.log(np.exp(z - m[..., None]).sum(axis=-1))
    rows = np.arange(b)
    chosen_logit = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    nll = (lse - chosen_logit).mean(axis=-1)
    p = np.exp(z - lse[..., None])
    p = np.where(avail, p, 0.0)
    grad = p
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return nll, grad / b


@dataclass(frozen=True)
class MLPConfig:
    hidden_layers: tuple = (30, 30)
    learning_rate: float = 0.001
    l2: float = 0.1
    epochs: int = 300
    batch_size: int = 64
    repetitions: int = 100
    feed_distance: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError("hidden layer widths must be >= 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be > 0 and l2 >= 0")


class MLPModel:
    """Trained classifier holding all repetitions plus the feature scaler."""

    def __init__(self, net: StackedNet, scaler_mean, scaler_sd, feature_names,
                 n_alts: int, cfg: MLPConfig, seed: int, final_losses=None,
                 name: str = "mlp"):
        self.net = net
        self.scaler_mean = np.asarray(scaler_mean, dtype=np.float64)
        self.scaler_sd = np.asarray(scaler_sd, dtype=np.float64)
        self.feature_names = tuple(feature_names)
        self.n_alts = int(n_alts)
        self.cfg = cfg
        self.seed = int(seed)
        self.final_losses = None if final_losses is None else np.asarray(final_losses)
        self.name = name

    def _standardize(self, features: FeatureTable) -> np.ndarray:
        if features.names != self.feature_names:
            raise ConfigError("feature layout does not match the trained model")
        return (features.values - self.scaler_mean) / self.scaler_sd

    def predict_proba_per_rep(self, features: FeatureTable, avail: np.ndarray) -> np.ndarray:
        x = self._standardize(features)
        k = self.net.n_reps
        xb = np.broadcast_to(x, (k,) + x.shape)
        logits = self.net.forward(xb)[-1]
        return masked_softmax(logits, np.broadcast_to(avail, logits.shape))

    def predict_proba(self, features_or_dataset, avail: np.ndarray | None = None) -> np.ndarray:
        """Repetition-averaged (N, J) probabilities, masked and renormalized."""
        if isinstance(features_or_dataset, ChoiceDataset):
            ds = features_or_dataset
            features = encode_features(ds, self.cfg.feed_distance)
            avail = ds.avail
        else:
            features = features_or_dataset
            if avail is None:
                raise ConfigError("avail mask required when passing raw features")
        per_rep = self.predict_proba_per_rep(features, avail)
        return ensemble_average(list(per_rep))

    def to_jsonable(self) -> dict:
        return {
            "kind": "mlp",
            "name": self.name,
            "net": self.net.to_jsonable(),
            "scaler_mean": self.scaler_mean.tolist(),
            "scaler_sd": self.scaler_sd.tolist(),
            "feature_names": list(self.feature_names),
            "n_alts": self.n_alts,
            "config": {
                "hidden_layers": list(self.cfg.hidden_layers),
                "learning_rate": self.cfg.learning_rate,
                "l2": self.cfg.l2,
                "epochs": self.cfg.epochs,
                "batch_size": self.cfg.batch_size,
                "repetitions": self.cfg.repetitions,
                "feed_distance": self.cfg.feed_distance,
            },
            "seed": self.seed,
            "final_losses": None if self.final_losses is None else self.final_losses.tolist(),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "MLPModel":
        cfg = MLPConfig(**d["config"])
        return cls(StackedNet.from_jsonable(d["net"]), d["scaler_mean"], d["scaler_sd"],
                   d["feature_names"], d["n_alts"], cfg, d["seed"],
                   d.get("final_losses"), d.get("name", "mlp"))


def mlp_train(
    features: FeatureTable,
    labels: np.ndarray,
    avail: np.ndarray,
    cfg: MLPConfig,
    seed: int = 0,
) -> MLPModel:
    """Train ``cfg.repetitions`` classifiers on standardized features."""
    labels = np.asarray(labels, dtype=np.int64)
    avail = np.asarray(avail, dtype=bool)
    n, j = avail.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= j:
        raise ConfigError("labels must index alternatives")
    mean = features.values.mean(axis=0)
    sd = features.values.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    x = (features.values - mean) / sd

    rngs = rep_streams(seed, cfg.repetitions)
    dims = (features.width, *cfg.hidden_layers, j)
    net = StackedNet.init(dims, rngs)

    def loss_grad(logits, idx):
        return masked_nll_and_grad(logits, labels[idx], avail[idx])

    losses = sgd_train(net, x, cfg.epochs, cfg.batch_size, cfg.learning_rate,
                       cfg.l2, rngs, loss_grad, what="mlp")
    return MLPModel(net, mean, sd, features.names, j, cfg, seed, losses)


def classifier_loss_and_grad(net: StackedNet, x: np.ndarray, labels: np.ndarray,
                             avail: np.ndarray, l2: float):
    """Full-batch objective and flat parameter gradient for a single-rep net;
    the probe that gradient-check tests drive against finite differences."""
    if net.n_reps != 1:
        raise ConfigError("gradient probe expects a single-repetition net")
    xb = x[None, :, :]
    acts = net.forward(xb)
    losses, dlogits = masked_nll_and_grad(acts[-1], labels[None, :], avail[None, :, :])
    grads_w, grads_b = net.backward(acts, dlogits)
    b = x.shape[0]
    loss = float(losses[0])
    flat = []
    for i, w in enumerate(net.weights):
        loss += 0.5 * l2 * float((w**2).sum()) / b
        flat.append((grads_w[i] + (l2 / b) * w).ravel())
        flat.append(grads_b[i].ravel())
    return loss, np.concatenate(flat)


def flat_params(net: StackedNet) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def set_flat_params(net: StackedNet, flat: np.ndarray) -> None:
    pos = 0
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
        pos += w.size
        net.biases[i] = flat[pos : pos + b.size].reshape(b.shape).copy()
        pos += b.size
