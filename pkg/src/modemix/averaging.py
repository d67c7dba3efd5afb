"""Distance-conditioned model averaging.

The sub-models are estimated first and then frozen: the gate never sees
their parameters, only the per-observation probabilities collected in a
:class:`ProbabilityPanel`. Training maximizes

    LL = sum_n log sum_m pi_m(z_n) * L_{n,m}

over the averaging-training rows (segments 2-9), where pi is a softmax gate
(logistic in z, or a small tanh network) and L_{n,m} is model m's frozen
probability of the observed choice. Restarts are trained in one stacked
pass; the top fraction by training log-likelihood is retained and the
ensemble prediction averages the retained gates' mixed probability vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .data import ROLE_MA_ONLY, ROLE_SUB_TRAIN, ChoiceDataset, DataSplit
from .errors import ConfigError, ConvergenceError, DataError, NumericalError
from .ml.net import StackedNet, rep_streams, sgd_train
from .rngs import substream

PANEL_FLOOR = 1e-12


@dataclass(frozen=True)
class ProbabilityPanel:
    """Frozen per-observation, per-model probabilities.

    ``chosen_prob`` (N, M) is each model's probability of the observed
    choice; ``prob_vectors`` (N, M, J) the full vectors. This panel is the
    only interface between sub-models and the gate.
    """

    obs_id: np.ndarray
    person_id: np.ndarray
    distance: np.ndarray
    segment: np.ndarray
    role: np.ndarray
    chosen: np.ndarray
    model_names: tuple
    chosen_prob: np.ndarray
    prob_vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "model_names", tuple(self.model_names))
        for name in ("obs_id", "person_id", "segment", "chosen"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "distance", np.asarray(self.distance, dtype=np.float64))
        object.__setattr__(self, "role", np.asarray(self.role, dtype="U10"))
        object.__setattr__(self, "chosen_prob", np.asarray(self.chosen_prob, dtype=np.float64))
        object.__setattr__(self, "prob_vectors", np.asarray(self.prob_vectors, dtype=np.float64))
        n = self.obs_id.size
        m = len(self.model_names)
        if m < 1:
            raise DataError("panel needs at least one model")
        if self.chosen_prob.shape != (n, m):
            raise DataError("chosen_prob shape mismatch")
        if self.prob_vectors.ndim != 3 or self.prob_vectors.shape[:2] != (n, m):
            raise DataError("prob_vectors shape mismatch")
        if np.any(~np.isfinite(self.chosen_prob)) or np.any(~np.isfinite(self.prob_vectors)):
            raise DataError("panel probabilities must be finite")
        if self.chosen_prob.min(initial=1.0) < 0 or self.chosen_prob.max(initial=0.0) > 1:
            raise DataError("chosen probabilities must lie in [0, 1]")
        sums = self.prob_vectors.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise DataError("probability vectors must sum to 1 within 1e-9")

    @property
    def n_obs(self) -> int:
        return self.obs_id.size

    @property
    def n_models(self) -> int:
        return len(self.model_names)

    @property
    def n_alts(self) -> int:
        return self.prob_vectors.shape[2]

    def subset(self, mask) -> "ProbabilityPanel":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return replace(
            self,
            obs_id=self.obs_id[idx],
            person_id=self.person_id[idx],
            distance=self.distance[idx],
            segment=self.segment[idx],
            role=self.role[idx],
            chosen=self.chosen[idx],
            chosen_prob=self.chosen_prob[idx],
            prob_vectors=self.prob_vectors[idx],
        )

    def training_mask(self) -> np.ndarray:
        return (self.role == ROLE_SUB_TRAIN) | (self.role == ROLE_MA_ONLY)


def build_panel(dataset: ChoiceDataset, split: DataSplit, fitted_models: list) -> ProbabilityPanel:
    """Score every observation (all segments) with every frozen sub-model.

    Probability vectors are floored at 1e-12 on available alternatives and
    renormalized, so downstream logs stay finite; unavailable alternatives
    keep exactly 0. Raises :class:`DataError` naming the model and first
    offending observation if a model emits NaN.
    """
    if not fitted_models:
        raise DataError("no fitted models supplied to the panel")
    n, j = dataset.avail.shape
    names = []
    vectors = np.empty((n, len(fitted_models), j))
    for k, model in enumerate(fitted_models):
        probs = np.asarray(model.predict_proba(dataset), dtype=np.float64)
        if probs.shape != (n, j):
            raise DataError(f"model {model.name!r} returned shape {probs.shape}")
        bad = np.flatnonzero(~np.isfinite(probs).all(axis=1))
        if bad.size:
            raise DataError(
                f"model {model.name!r} produced non-finite probability at obs {int(dataset.obs_id[bad[0]])}"
            )
        probs = np.where(dataset.avail, np.maximum(probs, PANEL_FLOOR), 0.0)
        probs = probs / probs.sum(axis=1, keepdims=True)
        vectors[:, k, :] = probs
        names.append(model.name)
    if len(set(names)) != len(names):
        raise DataError(f"duplicate model names in panel: {names}")
    chosen_prob = vectors[np.arange(n), :, dataset.chosen]
    return ProbabilityPanel(
        obs_id=dataset.obs_id,
        person_id=dataset.person_id,
        distance=dataset.distance,
        segment=split.segment,
        role=split.role,
        chosen=dataset.chosen,
        model_names=tuple(names),
        chosen_prob=chosen_prob,
        prob_vectors=vectors,
    )


def write_panel(panel: ProbabilityPanel, path) -> None:
    cols = ["obs_id", "person_id", "distance", "segment", "role", "chosen"]
    cols += [f"L_{m}" for m in panel.model_names]
    cols += [f"P_{m}_{j}" for m in panel.model_names for j in range(panel.n_alts)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(panel.n_obs):
            row = [
                int(panel.obs_id[i]), int(panel.person_id[i]),
                f"{panel.distance[i]:.12g}", int(panel.segment[i]),
                panel.role[i], int(panel.chosen[i]),
            ]
            row += [f"{v:.17g}" for v in panel.chosen_prob[i]]
            row += [f"{v:.17g}" for v in panel.prob_vectors[i].ravel()]
            w.writerow(row)


def read_panel(path) -> ProbabilityPanel:
    """Load a panel written by :func:`write_panel` (or produced externally
    in the same layout)."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    model_names = [c[2:] for c in header if c.startswith("L_")]
    if not model_names:
        raise DataError(f"{path}: no model probability columns found")
    n_alts = sum(1 for c in header if c.startswith(f"P_{model_names[0]}_"))
    idx = {c: i for i, c in enumerate(header)}
    n = len(rows)

    def col(name, dtype=np.float64):
        return np.array([r[idx[name]] for r in rows], dtype=dtype)

    chosen_prob = np.column_stack([col(f"L_{m}") for m in model_names])
    vectors = np.empty((n, len(model_names), n_alts))
    for k, m in enumerate(model_names):
        for j in range(n_alts):
            vectors[:, k, j] = col(f"P_{m}_{j}")
    return ProbabilityPanel(
        obs_id=col("obs_id", np.int64),
        person_id=col("person_id", np.int64),
        distance=col("distance"),
        segment=col("segment", np.int64),
        role=np.array([r[idx["role"]] for r in rows], dtype="U10"),
        chosen=col("chosen", np.int64),
        model_names=tuple(model_names),
        chosen_prob=chosen_prob,
        prob_vectors=vectors,
    )


# ---------------------------------------------------------------------------
# gates

GATE_INPUTS = ("distance", "log_distance", "prob_vectors")


def _raw_gate_inputs(panel: ProbabilityPanel, inputs: tuple, idx=None) -> np.ndarray:
    idx = np.arange(panel.n_obs) if idx is None else idx
    cols = []
    for token in inputs:
        if token == "distance":
            cols.append(panel.distance[idx][:, None])
        elif token == "log_distance":
            cols.append(np.log(panel.distance[idx])[:, None])
        elif token == "prob_vectors":
            cols.append(panel.prob_vectors[idx].reshape(len(idx), -1))
        else:
            raise ConfigError(f"unknown gate input {token!r}; choose from {GATE_INPUTS}")
    return np.concatenate(cols, axis=1)


def _inputs_from_distance(distance: np.ndarray, inputs: tuple) -> np.ndarray:
    d = np.atleast_1d(np.asarray(distance, dtype=np.float64))
    cols = []
    for token in inputs:
        if token == "distance":
            cols.append(d[:, None])
        elif token == "log_distance":
            cols.append(np.log(d)[:, None])
        else:
            raise ConfigError(
                f"gate input {token!r} cannot be derived from distance alone"
            )
    return np.concatenate(cols, axis=1)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class ConstantGate:
    """Fixed weights regardless of input; the M=1 and one-hot collapse cases."""

    kind = "constant"

    def __init__(self, weights, model_names=None):
        self.weight_vector = np.asarray(weights, dtype=np.float64)
        self.model_names = None if model_names is None else tuple(model_names)
        self.inputs = ()

    def weights_from_inputs(self, z_raw: np.ndarray) -> np.ndarray:
        return np.tile(self.weight_vector, (z_raw.shape[0], 1))

    def weights(self, distance) -> np.ndarray:
        d = np.atleast_1d(np.asarray(distance, dtype=np.float64))
        return np.tile(self.weight_vector, (d.size, 1))


class LogisticGate:
    """Softmax weights exp(gamma_m' z) / sum_l exp(gamma_l' z), with the last
    model's gamma fixed to 0. z is [1, standardized inputs]."""

    kind = "logistic"

    def __init__(self, gamma, inputs, mean, sd, model_names):
        self.gamma = np.asarray(gamma, dtype=np.float64)  # (M-1, Z+1)
        self.inputs = tuple(inputs)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sd = np.asarray(sd, dtype=np.float64)
        self.model_names = tuple(model_names)

    def _logits(self, z: np.ndarray) -> np.ndarray:
        part = z @ self.gamma.T
        return np.concatenate([part, np.zeros((z.shape[0], 1))], axis=1)

    def weights_from_inputs(self, z_raw: np.ndarray) -> np.ndarray:
        z = (z_raw - self.mean) / self.sd
        z = np.concatenate([np.ones((z.shape[0], 1)), z], axis=1)
        return softmax_rows(self._logits(z))

    def weights(self, distance) -> np.ndarray:
        return self.weights_from_inputs(_inputs_from_distance(distance, self.inputs))


def gate_weights_logistic(gamma: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Weights for explicit gate inputs z (no standardization): softmax of
    [gamma_m' z ..., 0]."""
    gamma = np.asarray(gamma, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    logits = np.concatenate([z @ gamma.T, np.zeros((z.shape[0], 1))], axis=1)
    w = softmax_rows(logits)
    return w[0] if single else w


class NeuralGate:
    """tanh MLP from standardized gate inputs to softmax model weights.

    Standardization constants are frozen at training time; out-of-range
    inputs are never clipped, so extrapolation behaviour is reproducible.
    """

    kind = "neural"

    def __init__(self, net: StackedNet, inputs, mean, sd, model_names,
                 restart_index: int = 0, train_loglik: float = float("nan")):
        if net.n_reps != 1:
            raise ConfigError("a NeuralGate wraps a single network")
        self.net = net
        self.inputs = tuple(inputs)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sd = np.asarray(sd, dtype=np.float64)
        self.model_names = tuple(model_names)
        self.restart_index = int(restart_index)
        self.train_loglik = float(train_loglik)

    def weights_from_inputs(self, z_raw: np.ndarray) -> np.ndarray:
        z = (z_raw - self.mean) / self.sd
        logits = self.net.forward(z[None, :, :])[-1][0]
        return softmax_rows(logits)

    def weights(self, distance) -> np.ndarray:
        """(n, M) weights from trip distance alone (the default gate input)."""
        return self.weights_from_inputs(_inputs_from_distance(distance, self.inputs))

    def to_jsonable(self) -> dict:
        return {
            "kind": "neural",
            "inputs": list(self.inputs),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "model_names": list(self.model_names),
            "restart_index": self.restart_index,
            "train_loglik": self.train_loglik,
            "net": self.net.to_jsonable(),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "NeuralGate":
        return cls(StackedNet.from_jsonable(d["net"]), d["inputs"], d["mean"],
                   d["sd"], d["model_names"], d["restart_index"], d["train_loglik"])


def _gate_weight_matrix(gate, panel: ProbabilityPanel, idx) -> np.ndarray:
    if isinstance(gate, np.ndarray):
        w = gate
        if w.ndim == 1:
            return np.tile(w, (len(idx), 1))
        return w[idx]
    z_raw = _raw_gate_inputs(panel, gate.inputs, idx) if gate.inputs else None
    if gate.inputs:
        return gate.weights_from_inputs(z_raw)
    return gate.weights_from_inputs(np.zeros((len(idx), 0)))


def ma_loglik(panel: ProbabilityPanel, gate, level: str = "observation", mask=None) -> float:
    """Model-averaging log-likelihood under a gate.

    ``gate`` may be a gate object or an explicit weight vector / matrix.
    Observation level sums log sum_m pi_m L_{n,m}; person level mixes the
    product of each person's likelihoods, with the gate evaluated at the
    person's mean trip distance.
    """
    idx = np.arange(panel.n_obs) if mask is None else np.flatnonzero(mask)
    if level == "observation":
        w = _gate_weight_matrix(gate, panel, idx)
        mix = np.einsum("nm,nm->n", w, panel.chosen_prob[idx])
        if np.any(mix <= 0):
            raise NumericalError("mixed probability fell to zero; check the panel floors")
        return float(np.log(mix).sum())
    if level != "person":
        raise ConfigError(f"unknown level {level!r}")
    persons = np.unique(panel.person_id[idx])
    total = 0.0
    for p in persons:
        sel = idx[panel.person_id[idx] == p]
        per_model = np.log(np.maximum(panel.chosen_prob[sel], PANEL_FLOOR)).sum(axis=0)
        mean_d = float(panel.distance[sel].mean())
        if isinstance(gate, np.ndarray):
            w = gate if gate.ndim == 1 else gate[sel[0]]
        else:
            w = gate.weights(mean_d)[0]
        with np.errstate(divide="ignore"):
            terms = np.log(w) + per_model
        m = terms.max()
        total += m + np.log(np.exp(terms - m).sum())
    return float(total)


def ma_predict(gate_or_ensemble, panel: ProbabilityPanel, mask=None) -> np.ndarray:
    """Averaged probability vectors sum_m pi_m P_{.,m}; for an ensemble, the
    mean of the retained gates' averaged vectors."""
    idx = np.arange(panel.n_obs) if mask is None else np.flatnonzero(mask)
    if isinstance(gate_or_ensemble, MAEnsemble):
        gates = gate_or_ensemble.gates
        out = np.zeros((len(idx), panel.n_alts))
        for g in gates:
            out += _mix_vectors(g, panel, idx)
        return out / len(gates)
    return _mix_vectors(gate_or_ensemble, panel, idx)


def _mix_vectors(gate, panel: ProbabilityPanel, idx) -> np.ndarray:
    w = _gate_weight_matrix(gate, panel, idx)
    return np.einsum("nm,nmj->nj", w, panel.prob_vectors[idx])


def ma_chosen_prob(gate_or_ensemble, panel: ProbabilityPanel, mask=None) -> np.ndarray:
    """Mixed probability of the observed choice per row."""
    idx = np.arange(panel.n_obs) if mask is None else np.flatnonzero(mask)
    if isinstance(gate_or_ensemble, MAEnsemble):
        acc = np.zeros(len(idx))
        for g in gate_or_ensemble.gates:
            w = _gate_weight_matrix(g, panel, idx)
            acc += np.einsum("nm,nm->n", w, panel.chosen_prob[idx])
        return acc / len(gate_or_ensemble.gates)
    w = _gate_weight_matrix(gate_or_ensemble, panel, idx)
    return np.einsum("nm,nm->n", w, panel.chosen_prob[idx])


@dataclass(frozen=True)
class GateConfig:
    kind: str = "neural"
    hidden_layers: tuple = (60, 60)
    learning_rate: float = 0.005
    batch_size: int = 128
    l2: float = 0.0001
    epochs: int = 100
    restarts: int = 100
    retain_frac: float = 0.2
    inputs: tuple = ("distance",)
    level: str = "observation"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind not in ("neural", "logistic"):
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if not 0 < self.retain_frac <= 1:
            raise ConfigError("retain_frac must lie in (0, 1]")
        if self.restarts < 1:
            raise ConfigError("need at least one restart")


@dataclass
class MAEnsemble:
    """Retained gates (top fraction of restarts by training log-likelihood,
    ties broken by restart index), best first."""

    gates: list
    logliks: np.ndarray
    restarts: int
    retain_frac: float
    model_names: tuple
    seed: int

    def weight_curve(self, distances) -> dict:
        d = np.asarray(distances, dtype=np.float64)
        stack = np.stack([g.weights(d) for g in self.gates])  # (G, n, M)
        return {
            "mean": stack.mean(axis=0),
            "min": stack.min(axis=0),
            "max": stack.max(axis=0),
        }

    def mean_weights(self, distances) -> np.ndarray:
        return self.weight_curve(distances)["mean"]

    def to_jsonable(self) -> dict:
        return {
            "kind": "ensemble",
            "restarts": self.restarts,
            "retain_frac": self.retain_frac,
            "model_names": list(self.model_names),
            "seed": self.seed,
            "logliks": [float(v) for v in self.logliks],
            "gates": [g.to_jsonable() for g in self.gates],
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "MAEnsemble":
        gates = []
        for g in d["gates"]:
            if g["kind"] == "neural":
                gates.append(NeuralGate.from_jsonable(g))
            else:
                gates.append(LogisticGate(g["gamma"], g["inputs"], g["mean"],
                                          g["sd"], g["model_names"]))
        return cls(gates, np.asarray(d["logliks"]), d["restarts"],
                   d["retain_frac"], tuple(d["model_names"]), d["seed"])


def train_gate(panel: ProbabilityPanel, cfg: GateConfig, seed: int = 0) -> MAEnsemble:
    """Train the gate on the averaging rows (roles sub_train and ma_only).

    All restarts advance in one stacked pass; each owns its RNG stream
    derived from (seed, restart index). Divergent restarts are excluded from
    retention; if every restart diverges an error is raised.
    """
    train_idx = np.flatnonzero(panel.training_mask())
    if train_idx.size == 0:
        raise ConvergenceError("panel has no averaging-training rows")
    if np.any(panel.chosen_prob[train_idx].max(axis=1) <= 0):
        raise NumericalError("a training row has zero probability under every model")

    z_raw = _raw_gate_inputs(panel, cfg.inputs, train_idx)
    mean = z_raw.mean(axis=0)
    sd = z_raw.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)

    if cfg.level == "person":
        inputs, targets = _person_level_training_rows(panel, train_idx, cfg, mean, sd)
        log_space = True
    else:
        inputs = (z_raw - mean) / sd
        targets = panel.chosen_prob[train_idx]
        log_space = False

    m = panel.n_models
    dims = (inputs.shape[1], *cfg.hidden_layers, m) if cfg.kind == "neural" else (inputs.shape[1], m)
    rngs = rep_streams(seed, cfg.restarts)
    net = StackedNet.init(dims, rngs)

    def loss_grad(logits, idx):
        w = softmax_rows(logits)
        tb = targets[idx]  # (K, B, M)
        if log_space:
            # person level: targets are per-model log-likelihood sums
            zmix = np.log(w) + tb
            mx = zmix.max(axis=2, keepdims=True)
            mix = np.exp(zmix - mx).sum(axis=2)
            loss = -(np.log(mix) + mx[..., 0]).mean(axis=1)
            post = np.exp(zmix - mx) / mix[..., None]     # responsibilities
            dlogits = (w - post) / idx.shape[1]
        else:
            mix = np.einsum("kbm,kbm->kb", w, tb)
            loss = -np.log(mix).mean(axis=1)
            dlogits = -w * (tb - mix[..., None]) / mix[..., None] / idx.shape[1]
        return loss, dlogits

    sgd_train(net, inputs, cfg.epochs, cfg.batch_size, cfg.learning_rate,
              cfg.l2, rngs, loss_grad, what="gate", raise_on_divergence=False)

    # selection log-likelihood on the full training rows, per restart
    full = np.broadcast_to(inputs, (cfg.restarts,) + inputs.shape)
    logits = net.forward(full)[-1]
    w_all = softmax_rows(logits)
    if log_space:
        zmix = np.log(w_all) + targets[None, :, :]
        mx = zmix.max(axis=2)
        lls = (np.log(np.exp(zmix - mx[..., None]).sum(axis=2)) + mx).sum(axis=1)
    else:
        lls = np.log(np.einsum("knm,nm->kn", w_all, targets)).sum(axis=1)
    lls = np.where(np.isfinite(lls), lls, -np.inf)
    if np.all(np.isinf(lls)):
        raise ConvergenceError("all gate restarts diverged")

    n_keep = int(np.ceil(cfg.retain_frac * cfg.restarts))
    order = np.lexsort((np.arange(cfg.restarts), -lls))
    keep = order[:n_keep]
    if not np.isfinite(lls[keep[0]]):
        raise ConvergenceError("all gate restarts diverged")

    gates = []
    for k in keep:
        sub = net.slice(int(k))
        if cfg.kind == "neural":
            gates.append(NeuralGate(sub, cfg.inputs, mean, sd, panel.model_names,
                                    restart_index=int(k), train_loglik=float(lls[k])))
        else:
            W = sub.weights[0][0]   # (Z, M)
            b = sub.biases[0][0]    # (M,)
            gamma = np.column_stack([b[:-1] - b[-1], (W[:, :-1] - W[:, -1:]).T])
            gates.append(LogisticGate(gamma, cfg.inputs, mean, sd, panel.model_names))
    return MAEnsemble(
        gates=gates,
        logliks=lls[keep],
        restarts=cfg.restarts,
        retain_frac=cfg.retain_frac,
        model_names=panel.model_names,
        seed=seed,
    )


def _person_level_training_rows(panel, train_idx, cfg, mean, sd):
    """Aggregate rows per person: gate input = mean trip distance, target =
    per-model sums of log-likelihoods."""
    persons, inverse = np.unique(panel.person_id[train_idx], return_inverse=True)
    n_p = persons.size
    log_l = np.log(np.maximum(panel.chosen_prob[train_idx], PANEL_FLOOR))
    targets = np.zeros((n_p, panel.n_models))
    np.add.at(targets, inverse, log_l)
    mean_d = np.zeros(n_p)
    counts = np.bincount(inverse, minlength=n_p)
    np.add.at(mean_d, inverse, panel.distance[train_idx])
    mean_d /= counts
    z = _inputs_from_distance(mean_d, cfg.inputs)
    return (z - mean) / sd, targets
