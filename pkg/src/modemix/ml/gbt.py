"""Newton-boosted decision trees for multi-class choice, from scratch.

One tree per class per round on the masked-softmax gradients g = p - y and
diagonal Hessian h = p (1 - p). Split search is exact greedy over presorted
feature columns with

    gain = 1/2 [ G_L^2/(H_L+reg) + G_R^2/(H_R+reg) - G^2/(H+reg) ] - gamma,
    leaf weight w = -G / (H + reg),

features subsampled per split, splits rejected when the gain is <= 0 or a
child's Hessian sum falls below ``min_child_weight``. Scores start from
log class priors, so zero rounds predict the priors. Each repetition holds
out an inner fraction for early stopping and owns its RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import ChoiceDataset
from ..errors import ConfigError
from .ensembles import ensemble_average
from .features import FeatureTable, encode_features
from .mlp import masked_softmax
from .net import rep_streams

PRIOR_FLOOR = 1e-12


def leaf_weight(G: float, H: float, reg: float) -> float:
    """Second-order optimal leaf value."""
    return -G / (H + reg)


def split_gain(GL, HL, GR, HR, reg: float, gamma: float):
    """Loss reduction of a split, net of the pruning threshold gamma."""
    parent = (GL + GR) ** 2 / (HL + HR + reg)
    return 0.5 * (GL**2 / (HL + reg) + GR**2 / (HR + reg) - parent) - gamma


@dataclass(frozen=True)
class GBTConfig:
    max_depth: int = 2
    gamma: float = 2.0
    colsample: float = 0.7
    min_child_weight: float = 1.0
    subsample: float = 1.0
    rounds: int = 200
    eta: float = 0.1
    l2_leaf: float = 1.0
    repetitions: int = 100
    inner_frac: float = 0.1
    patience: int = 20
    feed_distance: bool = False

    def __post_init__(self):
        if not 0 < self.colsample <= 1:
            raise ConfigError("colsample must lie in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")
        if self.max_depth < 0 or self.rounds < 0:
            raise ConfigError("max_depth and rounds must be >= 0")


@dataclass
class Tree:
    """Flat node arrays; feature -1 marks a leaf, children by node index."""

    feature: list
    threshold: list
    left: list
    right: list
    value: list

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        pos = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = feature[pos]
            internal = f >= 0
            if not internal.any():
                return value[pos]
            go_left = np.zeros(X.shape[0], dtype=bool)
            rows = np.flatnonzero(internal)
            go_left[rows] = X[rows, f[rows]] < threshold[pos[rows]]
            pos = np.where(internal, np.where(go_left, left[pos], right[pos]), pos)


def _find_split(Xs, SI, g, h, member, feats, cfg: GBTConfig):
    """Best (gain, feature, threshold) over candidate features for one node.

    Xs / SI are the presorted feature values and row orders (n, F); member is
    the node's row mask; columns of ``feats`` are the subsampled features.
    """
    M = member[SI[:, feats]]
    xs = Xs[:, feats]
    gm = np.where(M, g[SI[:, feats]], 0.0)
    hm = np.where(M, h[SI[:, feats]], 0.0)
    GL = np.cumsum(gm, axis=0)
    HL = np.cumsum(hm, axis=0)
    G = GL[-1]
    H = HL[-1]
    GR = G[None, :] - GL
    HR = H[None, :] - HL
    # first member value at-or-after each position; rising sort order makes
    # the suffix minimum exactly that value
    marked = np.where(M, xs, np.inf)
    suffix = np.minimum.accumulate(marked[::-1], axis=0)[::-1]
    next_x = np.vstack([suffix[1:], np.full((1, len(feats)), np.inf)])
    valid = M & np.isfinite(next_x) & (next_x > xs)
    valid &= (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
    with np.errstate(invalid="ignore", divide="ignore"):
        gains = split_gain(GL, HL, GR, HR, cfg.l2_leaf, cfg.gamma)
    gains = np.where(valid & np.isfinite(gains), gains, -np.inf)
    flat = int(np.argmax(gains))
    i, f_col = np.unravel_index(flat, gains.shape)
    best_gain = gains[i, f_col]
    if not np.isfinite(best_gain) or best_gain <= 0:
        return None
    thr = 0.5 * (xs[i, f_col] + next_x[i, f_col])
    return float(best_gain), int(feats[f_col]), float(thr)


def _build_tree(X, Xs, SI, g, h, row_mask, cfg: GBTConfig, rng) -> Tree:
    tree = Tree([], [], [], [], [])
    n_features = X.shape[1]
    n_take = max(1, int(round(cfg.colsample * n_features)))

    def new_node():
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(0.0)
        return len(tree.feature) - 1

    def grow(member, depth):
        node = new_node()
        G = float(g[member].sum())
        H = float(h[member].sum())
        split = None
        if depth < cfg.max_depth:
            feats = np.sort(rng.choice(n_features, size=n_take, replace=False))
            split = _find_split(Xs, SI, g, h, member, feats, cfg)
        if split is None:
            tree.value[node] = cfg.eta * leaf_weight(G, H, cfg.l2_leaf)
            return node
        _, feat, thr = split
        tree.feature[node] = feat
        tree.threshold[node] = thr
        left_member = member & (X[:, feat] < thr)
        tree.left[node] = grow(left_member, depth + 1)
        tree.right[node] = grow(member & ~left_member, depth + 1)
        return node

    grow(row_mask, 0)
    return tree


def _masked_nll(scores, avail, labels):
    p = masked_softmax(scores, avail)
    chosen = p[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(chosen, PRIOR_FLOOR)).mean())


@dataclass
class GBTBooster:
    """One repetition: class priors plus trees[round][class]."""

    log_prior: np.ndarray
    trees: list
    train_losses: list
    best_rounds: int

    def raw_scores(self, X: np.ndarray, n_rounds: int | None = None) -> np.ndarray:
        n_rounds = self.best_rounds if n_rounds is None else n_rounds
        scores = np.tile(self.log_prior, (X.shape[0], 1))
        for rnd in self.trees[:n_rounds]:
            for c, tree in enumerate(rnd):
                scores[:, c] += tree.predict(X)
        return scores

    def predict_proba(self, X: np.ndarray, avail: np.ndarray) -> np.ndarray:
        return masked_softmax(self.raw_scores(X), avail)


def train_booster(X, labels, avail, cfg: GBTConfig, rng) -> GBTBooster:
    n, j = avail.shape
    n_val = int(round(cfg.inner_frac * n)) if cfg.patience > 0 else 0
    if n_val > 0 and n - n_val >= j:
        order = rng.permutation(n)
        val_idx, tr_idx = order[:n_val], order[n_val:]
    else:
        val_idx, tr_idx = np.empty(0, dtype=int), np.arange(n)

    Xt, yt, at = X[tr_idx], labels[tr_idx], avail[tr_idx]
    counts = np.bincount(yt, minlength=j).astype(np.float64)
    prior = np.maximum(counts / counts.sum(), PRIOR_FLOOR)
    log_prior = np.log(prior)

    SI = np.argsort(Xt, axis=0, kind="stable")
    Xs = np.take_along_axis(Xt, SI, axis=0)
    Y = np.zeros((len(tr_idx), j))
    Y[np.arange(len(tr_idx)), yt] = 1.0

    scores = np.tile(log_prior, (len(tr_idx), 1))
    use_val = val_idx.size > 0
    if use_val:
        Xv, yv, av = X[val_idx], labels[val_idx], avail[val_idx]
        val_scores = np.tile(log_prior, (len(val_idx), 1))
        best_val = _masked_nll(val_scores, av, yv)
    trees = []
    train_losses = [_masked_nll(scores, at, yt)]
    best_rounds = 0
    since_best = 0
    for _ in range(cfg.rounds):
        p = masked_softmax(scores, at)
        g = p - np.where(at, Y, 0.0)
        h = p * (1.0 - p)
        if cfg.subsample < 1.0:
            row_mask = rng.random(len(tr_idx)) < cfg.subsample
            if not row_mask.any():
                row_mask[:] = True
        else:
            row_mask = np.ones(len(tr_idx), dtype=bool)
        rnd = []
        for c in range(j):
            tree = _build_tree(Xt, Xs, SI, g[:, c], h[:, c], row_mask, cfg, rng)
            rnd.append(tree)
            scores[:, c] += tree.predict(Xt)
        trees.append(rnd)
        train_losses.append(_masked_nll(scores, at, yt))
        if use_val:
            for c, tree in enumerate(rnd):
                val_scores[:, c] += tree.predict(Xv)
            val_loss = _masked_nll(val_scores, av, yv)
            if val_loss < best_val - 1e-12:
                best_val = val_loss
                best_rounds = len(trees)
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        else:
            best_rounds = len(trees)
    return GBTBooster(log_prior=log_prior, trees=trees,
                      train_losses=train_losses, best_rounds=best_rounds)


class GBTModel:
    """All repetitions of the boosted-tree classifier."""

    def __init__(self, boosters: list, feature_names, n_alts: int,
                 cfg: GBTConfig, seed: int, name: str = "gbt"):
        self.boosters = boosters
        self.feature_names = tuple(feature_names)
        self.n_alts = int(n_alts)
        self.cfg = cfg
        self.seed = int(seed)
        self.name = name

    def predict_proba_per_rep(self, features: FeatureTable, avail: np.ndarray) -> np.ndarray:
        if features.names != self.feature_names:
            raise ConfigError("feature layout does not match the trained model")
        return np.stack([b.predict_proba(features.values, avail) for b in self.boosters])

    def predict_proba(self, features_or_dataset, avail: np.ndarray | None = None) -> np.ndarray:
        if isinstance(features_or_dataset, ChoiceDataset):
            ds = features_or_dataset
            features = encode_features(ds, self.cfg.feed_distance)
            avail = ds.avail
        else:
            features = features_or_dataset
            if avail is None:
                raise ConfigError("avail mask required when passing raw features")
        return ensemble_average(list(self.predict_proba_per_rep(features, avail)))

    def to_jsonable(self) -> dict:
        reps = []
        for b in self.boosters:
            reps.append({
                "log_prior": b.log_prior.tolist(),
                "best_rounds": b.best_rounds,
                "train_losses": list(b.train_losses),
                "trees": [
                    [
                        {
                            "feature": t.feature,
                            "threshold": t.threshold,
                            "left": t.left,
                            "right": t.right,
                            "value": t.value,
                        }
                        for t in rnd
                    ]
                    for rnd in b.trees
                ],
            })
        return {
            "kind": "gbt",
            "name": self.name,
            "feature_names": list(self.feature_names),
            "n_alts": self.n_alts,
            "config": {
                "max_depth": self.cfg.max_depth,
                "gamma": self.cfg.gamma,
                "colsample": self.cfg.colsample,
                "min_child_weight": self.cfg.min_child_weight,
                "subsample": self.cfg.subsample,
                "rounds": self.cfg.rounds,
                "eta": self.cfg.eta,
                "l2_leaf": self.cfg.l2_leaf,
                "repetitions": self.cfg.repetitions,
                "inner_frac": self.cfg.inner_frac,
                "patience": self.cfg.patience,
                "feed_distance": self.cfg.feed_distance,
            },
            "seed": self.seed,
            "repetition_models": reps,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "GBTModel":
        cfg = GBTConfig(**d["config"])
        boosters = []
        for rep in d["repetition_models"]:
            trees = [
                [Tree(t["feature"], t["threshold"], t["left"], t["right"], t["value"])
                 for t in rnd]
                for rnd in rep["trees"]
            ]
            boosters.append(GBTBooster(np.asarray(rep["log_prior"]), trees,
                                       list(rep["train_losses"]), rep["best_rounds"]))
        return cls(boosters, d["feature_names"], d["n_alts"], cfg, d["seed"],
                   d.get("name", "gbt"))


def gbt_train(
    features: FeatureTable,
    labels: np.ndarray,
    avail: np.ndarray,
    cfg: GBTConfig,
    seed: int = 0,
) -> GBTModel:
    """Train ``cfg.repetitions`` boosters, each on its own RNG stream."""
    labels = np.asarray(labels, dtype=np.int64)
    avail = np.asarray(avail, dtype=bool)
    rngs = rep_streams(seed, cfg.repetitions)
    boosters = [train_booster(features.values, labels, avail, cfg, rng) for rng in rngs]
    return GBTModel(boosters, features.names, avail.shape[1], cfg, seed)
