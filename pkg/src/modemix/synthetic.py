"""Seeded synthetic mode-choice data with distance-banded regimes.

Trip distances are log-normal; per-alternative times and costs are derived
from the distance (speed, fare and fuel rules with multiplicative noise), so
the attribute ranges drift with distance exactly as they do in travel data.
Choices are sampled from a regime's data-generating process: a linear logit,
a logit with distance-decaying sensitivities and attribute interactions, or
a nested logit. Ground-truth probabilities are returned alongside the
dataset for oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ChoiceDataset
from .errors import ConfigError
from .logit import NestSpec, mnl_prob, nl_prob
from .rngs import substream


@dataclass(frozen=True)
class ModeSpec:
    """How one alternative's attributes are generated from trip distance."""

    speed_kmh: float
    ivt_noise_sd: float = 0.12
    ovt_base: float = 0.0
    ovt_spread: float = 0.0
    cost_fixed: float = 0.0
    cost_per_km: float = 0.0
    cost_noise_sd: float = 0.0
    avail: str = "always"   # "always" | "bernoulli:<p>" | "socio:<name>"


@dataclass(frozen=True)
class RegimeSpec:
    """Data-generating process for one distance band.

    ``coeffs`` maps alternative -> {"asc": a, "<attr>": b, ...}. The
    interaction kind adds distance-decaying sensitivities
    b_eff = b + amp * exp(-d / scale) per attribute and same-alternative
    attribute products; the nested kind draws from a nested logit.
    """

    upto_km: float
    kind: str                    # "linear" | "interaction" | "nested"
    coeffs: dict
    decay: dict = field(default_factory=dict)          # attr -> {amp, scale}
    interactions: tuple = ()                           # ({"attrs": (a, b), "coef": c}, ...)
    nests: tuple = ()                                  # tuple of tuples of alt names
    lambdas: tuple = ()

    def __post_init__(self):
        if self.kind not in ("linear", "interaction", "nested"):
            raise ConfigError(f"unknown regime kind {self.kind!r}")
        if self.kind == "nested" and (not self.nests or len(self.nests) != len(self.lambdas)):
            raise ConfigError("nested regime needs nests and matching lambdas")


@dataclass(frozen=True)
class SyntheticConfig:
    n_obs: int
    alt_names: tuple
    attr_names: tuple
    modes: dict                    # alt -> ModeSpec
    regimes: tuple                 # RegimeSpec, ascending upto_km, last inf
    distance_meanlog: float = 1.1
    distance_sdlog: float = 1.05
    socio: tuple = ()              # ({"name": ..., "p": ...}, ...) Bernoulli draws
    trips_per_person: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alt_names", tuple(self.alt_names))
        object.__setattr__(self, "attr_names", tuple(self.attr_names))
        object.__setattr__(self, "regimes", tuple(self.regimes))
        object.__setattr__(self, "socio", tuple(self.socio))
        uptos = [r.upto_km for r in self.regimes]
        if list(uptos) != sorted(uptos) or not np.isinf(uptos[-1]):
            raise ConfigError("regime bands must ascend and end at infinity")
        for alt in self.alt_names:
            if alt not in self.modes:
                raise ConfigError(f"no mode spec for alternative {alt!r}")


def _regime_utilities(regime: RegimeSpec, cfg: SyntheticConfig, attrs, distance):
    """(n, J) systematic utilities under the regime's process."""
    n = attrs.shape[0]
    J = len(cfg.alt_names)
    V = np.zeros((n, J))
    for j, alt in enumerate(cfg.alt_names):
        co = regime.coeffs[alt]
        V[:, j] += co.get("asc", 0.0)
        for a, attr in enumerate(cfg.attr_names):
            beta = co.get(attr, 0.0)
            if regime.kind == "interaction" and attr in regime.decay:
                dk = regime.decay[attr]
                beta = beta + dk["amp"] * np.exp(-distance / dk["scale"])
            V[:, j] += beta * attrs[:, j, a]
        if regime.kind == "interaction":
            for inter in regime.interactions:
                a1, a2 = inter["attrs"]
                i1, i2 = cfg.attr_names.index(a1), cfg.attr_names.index(a2)
                V[:, j] += inter["coef"] * attrs[:, j, i1] * attrs[:, j, i2]
    return V


def generate_synthetic(cfg: SyntheticConfig, seed: int = 0):
    """Returns (dataset, truth) where truth is the (N, J) probability table
    the choices were sampled from (zeros on unavailable alternatives)."""
    n = cfg.n_obs
    J = len(cfg.alt_names)
    A = len(cfg.attr_names)
    rng = substream(seed, "synthetic")

    distance = np.exp(rng.normal(cfg.distance_meanlog, cfg.distance_sdlog, n))

    socio_names = tuple(s["name"] for s in cfg.socio)
    socio = np.zeros((n, len(cfg.socio)))
    for i, s in enumerate(cfg.socio):
        socio[:, i] = (rng.random(n) < s["p"]).astype(float)

    attrs = np.zeros((n, J, A))
    avail = np.zeros((n, J), dtype=bool)
    for j, alt in enumerate(cfg.alt_names):
        ms = cfg.modes[alt]
        ivt = 60.0 * distance / ms.speed_kmh
        if ms.ivt_noise_sd > 0:
            ivt = ivt * np.exp(rng.normal(0.0, ms.ivt_noise_sd, n))
        ovt = ms.ovt_base + ms.ovt_spread * rng.random(n)
        cost = ms.cost_fixed + ms.cost_per_km * distance
        if ms.cost_noise_sd > 0:
            cost = cost * np.exp(rng.normal(0.0, ms.cost_noise_sd, n))
        for a, attr in enumerate(cfg.attr_names):
            if attr == "ivt_min":
                attrs[:, j, a] = ivt
            elif attr == "ovt_min":
                attrs[:, j, a] = ovt
            elif attr == "cost":
                attrs[:, j, a] = cost
            else:
                raise ConfigError(f"unknown attribute {attr!r} in synthetic generator")
        if ms.avail == "always":
            avail[:, j] = True
        elif ms.avail.startswith("bernoulli:"):
            avail[:, j] = rng.random(n) < float(ms.avail.split(":", 1)[1])
        elif ms.avail.startswith("socio:"):
            name = ms.avail.split(":", 1)[1]
            if name not in socio_names:
                raise ConfigError(f"availability rule references unknown socio {name!r}")
            avail[:, j] = socio[:, socio_names.index(name)] > 0
        else:
            raise ConfigError(f"unknown availability rule {ms.avail!r}")
    # nobody gets an empty choice set: fall back to the first alternative
    empty = ~avail.any(axis=1)
    avail[empty, 0] = True

    truth = np.zeros((n, J))
    lower = 0.0
    for regime in cfg.regimes:
        band = (distance >= lower) & (distance < regime.upto_km)
        lower = regime.upto_km
        if not band.any():
            continue
        V = _regime_utilities(regime, cfg, attrs[band], distance[band])
        if regime.kind == "nested":
            alt_idx = {a: i for i, a in enumerate(cfg.alt_names)}
            groups = tuple(tuple(alt_idx[a] for a in g) for g in regime.nests)
            truth[band] = nl_prob(V, NestSpec(groups, np.asarray(regime.lambdas)), avail[band])
        else:
            truth[band] = mnl_prob(V, avail[band])

    u = rng.random(n)
    cum = np.cumsum(truth, axis=1)
    chosen = (u[:, None] > cum).sum(axis=1)
    # float-edge guard: never land on an unavailable alternative
    chosen = np.minimum(chosen, J - 1)
    bad = ~avail[np.arange(n), chosen]
    if bad.any():
        chosen[bad] = np.argmax(truth[bad], axis=1)

    person_id = np.arange(n, dtype=np.int64) // max(1, cfg.trips_per_person)
    dataset = ChoiceDataset(
        obs_id=np.arange(n, dtype=np.int64),
        person_id=person_id,
        chosen=chosen,
        distance=distance,
        avail=avail,
        attrs=attrs,
        socio=socio,
        alt_names=cfg.alt_names,
        attr_names=cfg.attr_names,
        socio_names=socio_names,
    )
    return dataset, truth


def clone_distance_profile(
    n_obs: int,
    anchors: tuple,
    seed: int = 0,
) -> np.ndarray:
    """Distances replaying a target distribution via a piecewise log-linear
    quantile function through (percentile, km) anchor points."""
    qs = np.array([a[0] for a in anchors])
    kms = np.array([a[1] for a in anchors])
    if np.any(np.diff(qs) <= 0) or np.any(np.diff(kms) <= 0):
        raise ConfigError("quantile anchors must be strictly increasing")
    rng = substream(seed, "clone-distances")
    u = rng.uniform(qs[0], qs[-1], n_obs)
    return np.exp(np.interp(u, qs, np.log(kms)))
