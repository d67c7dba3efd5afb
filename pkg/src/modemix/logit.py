"""Multinomial and two-level nested logit: linear-plus-log utilities,
choice probabilities, analytic score, and maximum-likelihood estimation.

Utilities are linear in parameters, so each model reduces to a design tensor
X of shape (N, J, P) with V = X @ theta. Nest scale parameters live in
(0, 1] through a logistic transform during estimation; lambda = 1 in every
nest reproduces the multinomial logit exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit

from .data import ChoiceDataset, ObsRecord
from .errors import ConfigError, ConvergenceError
from .rngs import substream

NEG_INF = -np.inf


def masked_logsumexp(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over entries where mask is True (-inf elsewhere)."""
    v = np.where(mask, values, NEG_INF)
    m = np.max(v, axis=-1)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return shift + np.log(np.exp(v - shift[..., None]).sum(axis=-1))


def mnl_prob(V: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Logit probabilities over the available set, max-shift stabilized.

    Accepts a single (J,) utility vector or a batch (N, J); unavailable
    alternatives get probability 0.
    """
    V = np.asarray(V, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    single = V.ndim == 1
    if single:
        V, avail = V[None, :], avail[None, :]
    lse = masked_logsumexp(V, avail)
    with np.errstate(invalid="ignore"):
        P = np.where(avail, np.exp(V - lse[:, None]), 0.0)
    return P[0] if single else P


@dataclass(frozen=True)
class NestSpec:
    """Partition of alternatives into nests, with one scale per nest."""

    nests: tuple            # tuple of tuples of alternative indices
    lambdas: np.ndarray     # (G,) in (0, 1]

    def __post_init__(self):
        nests = tuple(tuple(int(a) for a in g) for g in self.nests)
        object.__setattr__(self, "nests", nests)
        lam = np.asarray(self.lambdas, dtype=np.float64)
        object.__setattr__(self, "lambdas", lam)
        alts = [a for g in nests for a in g]
        if len(set(alts)) != len(alts):
            raise ConfigError("nests overlap")
        if lam.shape != (len(nests),):
            raise ConfigError("one lambda per nest required")
        if np.any(lam <= 0) or np.any(lam > 1):
            raise ConfigError("nest lambdas must lie in (0, 1]")

    @property
    def n_alts(self) -> int:
        return sum(len(g) for g in self.nests)

    def nest_of(self) -> np.ndarray:
        out = np.empty(self.n_alts, dtype=np.int64)
        for g, members in enumerate(self.nests):
            for a in members:
                out[a] = g
        return out


def _nest_logsumexp(U: np.ndarray, members) -> np.ndarray:
    sub = U[:, members]
    m = np.max(sub, axis=1)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return shift + np.log(np.exp(sub - shift[:, None]).sum(axis=1))


def _nl_log_parts(V, avail, nest_of, nests, lam):
    """Shared pieces of the nested logit: logW (N,G), logQ (N,J), logI (N,G)."""
    lam_j = lam[nest_of]
    with np.errstate(invalid="ignore"):
        U = np.where(avail, V / lam_j[None, :], NEG_INF)
    G = len(nests)
    I = np.empty((V.shape[0], G))
    for g, members in enumerate(nests):
        I[:, g] = _nest_logsumexp(U, list(members))
    Ng = lam[None, :] * I  # lam > 0, so empty nests stay -inf
    logZ = masked_logsumexp(Ng, np.ones(Ng.shape, dtype=bool))
    logW = Ng - logZ[:, None]
    with np.errstate(invalid="ignore"):
        logQ = np.where(avail, U - I[:, nest_of], NEG_INF)
    return logW, logQ, I


def nl_prob(V: np.ndarray, nest_spec: NestSpec, avail: np.ndarray) -> np.ndarray:
    """Two-level nested logit probabilities: P_j = P(nest) * P(j | nest).

    With every lambda equal to 1 this reproduces :func:`mnl_prob` exactly.
    """
    V = np.asarray(V, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    single = V.ndim == 1
    if single:
        V, avail = V[None, :], avail[None, :]
    nest_of = nest_spec.nest_of()
    if nest_of.size != V.shape[1]:
        raise ConfigError("nest specification does not cover all alternatives")
    logW, logQ, _ = _nl_log_parts(V, avail, nest_of, nest_spec.nests, nest_spec.lambdas)
    with np.errstate(invalid="ignore"):
        P = np.where(avail, np.exp(logW[:, nest_of] + logQ), 0.0)
    return P[0] if single else P


@dataclass(frozen=True)
class UtilitySpec:
    """Which attributes enter linearly, which via log(x + delta), and which
    socio variables shift which alternatives' utilities."""

    attrs: tuple
    log_attrs: tuple = ()
    socio_terms: tuple = ()  # (socio_name, alt_name) pairs

    def __post_init__(self):
        object.__setattr__(self, "attrs", tuple(self.attrs))
        object.__setattr__(self, "log_attrs", tuple(self.log_attrs))
        object.__setattr__(self, "socio_terms", tuple(tuple(t) for t in self.socio_terms))


@dataclass(frozen=True)
class UtilityParams:
    """Named view of a utility coefficient vector (one ASC fixed to 0)."""

    asc: np.ndarray
    beta_lin: np.ndarray
    beta_log: np.ndarray
    socio: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.asc, self.beta_lin, self.beta_log, self.socio])


class LinearUtility:
    """Resolves a :class:`UtilitySpec` against dataset column names and
    builds the (N, J, P) design tensor. The last alternative's ASC is the
    normalized zero."""

    def __init__(self, spec: UtilitySpec, alt_names, attr_names, socio_names=(), delta: float = 0.01):
        self.spec = spec
        self.alt_names = tuple(alt_names)
        self.attr_names = tuple(attr_names)
        self.socio_names = tuple(socio_names)
        self.delta = float(delta)
        attr_idx = {a: i for i, a in enumerate(self.attr_names)}
        alt_idx = {a: i for i, a in enumerate(self.alt_names)}
        socio_idx = {s: i for i, s in enumerate(self.socio_names)}
        try:
            self._lin = [attr_idx[a] for a in spec.attrs]
            self._log = [attr_idx[a] for a in spec.log_attrs]
            self._socio = [(socio_idx[s], alt_idx[a]) for s, a in spec.socio_terms]
        except KeyError as exc:
            raise ConfigError(f"utility spec names unknown column {exc}") from exc
        self.param_names = (
            [f"asc_{a}" for a in self.alt_names[:-1]]
            + [f"b_{a}" for a in spec.attrs]
            + [f"b_log_{a}" for a in spec.log_attrs]
            + [f"b_{s}@{a}" for s, a in spec.socio_terms]
        )

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def params_view(self, theta: np.ndarray) -> UtilityParams:
        j1 = len(self.alt_names) - 1
        nl, ng = len(self._lin), len(self._log)
        return UtilityParams(
            asc=theta[:j1],
            beta_lin=theta[j1 : j1 + nl],
            beta_log=theta[j1 + nl : j1 + nl + ng],
            socio=theta[j1 + nl + ng :],
        )

    def design(self, dataset: ChoiceDataset) -> np.ndarray:
        n, j = dataset.n_obs, dataset.n_alts
        X = np.zeros((n, j, self.n_params))
        p = 0
        for a in range(j - 1):
            X[:, a, p] = 1.0
            p += 1
        for ai in self._lin:
            X[:, :, p] = dataset.attrs[:, :, ai]
            p += 1
        for ai in self._log:
            X[:, :, p] = np.log(dataset.attrs[:, :, ai] + self.delta)
            p += 1
        for si, alt in self._socio:
            X[:, alt, p] = dataset.socio[:, si]
            p += 1
        return X

    def utilities(self, theta: np.ndarray, dataset: ChoiceDataset, design: np.ndarray | None = None) -> np.ndarray:
        X = self.design(dataset) if design is None else design
        return X @ np.asarray(theta, dtype=np.float64)

    def utility_row(self, theta, record: ObsRecord) -> np.ndarray:
        """V_j for one observation; theta may be a vector or UtilityParams."""
        if isinstance(theta, UtilityParams):
            theta = theta.vector
        theta = np.asarray(theta, dtype=np.float64)
        j = len(self.alt_names)
        V = np.zeros(j)
        V[: j - 1] += theta[: j - 1]
        p = j - 1
        for ai in self._lin:
            V += theta[p] * record.attrs[:, ai]
            p += 1
        for ai in self._log:
            V += theta[p] * np.log(record.attrs[:, ai] + self.delta)
            p += 1
        for si, alt in self._socio:
            V[alt] += theta[p] * record.socio[si]
            p += 1
        return V


@dataclass(frozen=True)
class ChoiceModelSpec:
    """Utility specification plus an optional nest structure (None = MNL)."""

    utility: UtilitySpec
    nests: tuple | None = None  # tuple of tuples of alternative names

    @property
    def kind(self) -> str:
        return "mnl" if self.nests is None else "nl"

    def resolve_nests(self, alt_names) -> tuple:
        alt_idx = {a: i for i, a in enumerate(alt_names)}
        try:
            groups = tuple(tuple(alt_idx[a] for a in g) for g in self.nests)
        except KeyError as exc:
            raise ConfigError(f"nest names unknown alternative {exc}") from exc
        covered = sorted(a for g in groups for a in g)
        if covered != list(range(len(alt_names))):
            raise ConfigError("nests must partition the alternatives")
        return groups


def _mnl_ll_grad(theta, X, chosen, avail):
    n = X.shape[0]
    V = X @ theta
    lse = masked_logsumexp(V, avail)
    logp_chosen = V[np.arange(n), chosen] - lse
    with np.errstate(invalid="ignore"):
        P = np.where(avail, np.exp(V - lse[:, None]), 0.0)
    resid = -P
    resid[np.arange(n), chosen] += 1.0
    grad = np.einsum("nj,njp->p", resid, X)
    return logp_chosen, grad


def _nl_ll_grad(theta_u, lam, X, chosen, avail, nest_of, nests):
    """Per-observation log-probs plus gradients w.r.t. utility params and
    lambdas (before the logistic chain rule)."""
    n = X.shape[0]
    V = X @ theta_u
    logW, logQ, I = _nl_log_parts(V, avail, nest_of, nests, lam)
    rows = np.arange(n)
    gc = nest_of[chosen]                       # chosen nest per obs
    logp_chosen = logW[rows, gc] + logQ[rows, chosen]

    with np.errstate(invalid="ignore"):
        Q = np.where(avail, np.exp(logQ), 0.0)
        W = np.exp(logW)                       # 0 for empty nests
    lam_c = lam[gc]
    in_cnest = nest_of[None, :] == gc[:, None]
    dV = Q * (in_cnest * (1.0 - 1.0 / lam_c[:, None]) - W[:, nest_of])
    dV[rows, chosen] += 1.0 / lam_c
    grad_u = np.einsum("nj,njp->p", dV, X)

    # lambda gradient: Vbar_h = sum_{k in nest h} Q_k V_k
    QV = Q * V
    G = len(nests)
    Vbar = np.empty((n, G))
    for g, members in enumerate(nests):
        Vbar[:, g] = QV[:, list(members)].sum(axis=1)
    with np.errstate(invalid="ignore"):
        nest_term = I - Vbar / lam[None, :]
    dLam = np.where(W > 0, -W * np.where(np.isfinite(nest_term), nest_term, 0.0), 0.0)
    Vc = V[rows, chosen]
    own = (
        I[rows, gc]
        - Vbar[rows, gc] / lam_c
        - Vc / lam_c**2
        + Vbar[rows, gc] / lam_c**2
    )
    dLam[rows, gc] += own
    return logp_chosen, grad_u, dLam.sum(axis=0)


def choice_loglik(theta, dataset: ChoiceDataset, spec: ChoiceModelSpec):
    """Total log-likelihood and per-observation chosen log-probabilities."""
    lu = LinearUtility(spec.utility, dataset.alt_names, dataset.attr_names,
                       dataset.socio_names, dataset.log_delta)
    theta = np.asarray(theta, dtype=np.float64)
    X = lu.design(dataset)
    if spec.kind == "mnl":
        logp, _ = _mnl_ll_grad(theta, X, dataset.chosen, dataset.avail)
    else:
        groups = spec.resolve_nests(dataset.alt_names)
        G = len(groups)
        nest_spec = NestSpec(nests=groups, lambdas=theta[lu.n_params:])
        V = X @ theta[: lu.n_params]
        P = nl_prob(V, nest_spec, dataset.avail)
        logp = np.log(P[np.arange(dataset.n_obs), dataset.chosen])
    return float(logp.sum()), logp


@dataclass(frozen=True)
class OptimizerConfig:
    starts: int = 5
    gtol: float = 1e-6
    max_iter: int = 500
    perturb_scale: float = 0.25
    seed: int = 0


@dataclass
class FitResult:
    model_kind: str
    param_names: list
    theta: np.ndarray
    params: dict
    loglik: float
    gradient_norm: float
    converged: bool
    hessian_condition: float
    n_obs: int
    std_errors: dict | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)


def _fd_hessian(grad_fn, x, rel_step=1e-5):
    p = x.size
    H = np.empty((p, p))
    for i in range(p):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros(p)
        e[i] = h
        H[i] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _multistart_minimize(objective, n_params, cfg: OptimizerConfig):
    """Quasi-Newton descent from zeros plus seeded perturbations; returns the
    best endpoint, never worse than the best starting point."""
    rng = substream(cfg.seed, "estimate-starts")
    starts = [np.zeros(n_params)]
    for _ in range(max(0, cfg.starts - 1)):
        starts.append(rng.normal(0.0, cfg.perturb_scale, n_params))
    candidates = []
    for x0 in starts:
        f0, g0 = objective(x0)
        candidates.append((f0, x0, g0))
        res = optimize.minimize(
            objective, x0, jac=True, method="BFGS",
            options={"gtol": cfg.gtol, "maxiter": cfg.max_iter, "norm": np.inf},
        )
        if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
            candidates.append((res.fun, res.x, res.jac))
    best = min(candidates, key=lambda c: c[0])
    return best


def estimate(dataset: ChoiceDataset, spec: ChoiceModelSpec, cfg: OptimizerConfig | None = None) -> FitResult:
    """Maximum-likelihood fit of an MNL or NL model.

    Nest scales are optimized through lambda = expit(theta); the reported
    parameters carry the transformed lambdas. Convergence means the
    log-likelihood gradient max-norm dropped below ``cfg.gtol``.
    """
    if dataset.n_obs == 0:
        raise ConvergenceError("cannot estimate on an empty subset")
    cfg = cfg or OptimizerConfig()
    lu = LinearUtility(spec.utility, dataset.alt_names, dataset.attr_names,
                       dataset.socio_names, dataset.log_delta)
    X = lu.design(dataset)
    chosen, avail = dataset.chosen, dataset.avail
    if spec.kind == "mnl":
        n_params = lu.n_params

        def objective(theta):
            logp, grad = _mnl_ll_grad(theta, X, chosen, avail)
            return -logp.sum(), -grad
    else:
        groups = spec.resolve_nests(dataset.alt_names)
        nest_of = NestSpec(groups, np.ones(len(groups))).nest_of()
        n_params = lu.n_params + len(groups)

        def objective(theta):
            lam = expit(theta[lu.n_params:])
            logp, gu, glam = _nl_ll_grad(theta[: lu.n_params], lam, X, chosen, avail, nest_of, groups)
            grad = np.concatenate([gu, glam * lam * (1.0 - lam)])
            return -logp.sum(), -grad

    nll, theta_opt, grad = _multistart_minimize(objective, n_params, cfg)
    gnorm = float(np.max(np.abs(grad)))

    H = _fd_hessian(lambda x: objective(x)[1], theta_opt)
    with np.errstate(all="ignore"):
        cond = float(np.linalg.cond(H))
    std = None
    try:
        cov = np.linalg.inv(H)
        diag = np.diag(cov)
        if np.all(diag > 0):
            std = np.sqrt(diag)
    except np.linalg.LinAlgError:
        std = None

    # reported parameters live in the natural space (lambdas, not their logits)
    names = list(lu.param_names)
    theta = theta_opt.copy()
    if spec.kind == "nl":
        theta[lu.n_params:] = expit(theta_opt[lu.n_params:])
        names += [f"lambda_{g}" for g in range(len(spec.nests))]
    params = {k: float(v) for k, v in zip(names, theta)}
    std_errors = None
    if std is not None:
        # lambda std errors mapped through the logistic derivative
        scale = np.ones(n_params)
        if spec.kind == "nl":
            lam = theta[lu.n_params:]
            scale[lu.n_params:] = lam * (1.0 - lam)
        std_errors = {k: float(s * c) for k, s, c in zip(names, std, scale)}
    return FitResult(
        model_kind=spec.kind,
        param_names=names,
        theta=theta,
        params=params,
        loglik=float(-nll),
        gradient_norm=gnorm,
        converged=bool(gnorm < cfg.gtol),
        hessian_condition=cond,
        n_obs=dataset.n_obs,
        std_errors=std_errors,
    )


class FittedChoiceModel:
    """A frozen MNL/NL fit that can score any dataset with the same columns."""

    def __init__(self, name: str, spec: ChoiceModelSpec, fit: FitResult,
                 alt_names, attr_names, socio_names, delta: float):
        self.name = name
        self.spec = spec
        self.fit = fit
        self.alt_names = tuple(alt_names)
        self.attr_names = tuple(attr_names)
        self.socio_names = tuple(socio_names)
        self.delta = float(delta)

    def _utilities(self, dataset: ChoiceDataset) -> np.ndarray:
        lu = LinearUtility(self.spec.utility, self.alt_names, self.attr_names,
                           self.socio_names, self.delta)
        return lu.utilities(self.fit.theta[: lu.n_params], dataset)

    def predict_proba(self, dataset: ChoiceDataset) -> np.ndarray:
        V = self._utilities(dataset)
        if self.spec.kind == "mnl":
            return mnl_prob(V, dataset.avail)
        groups = self.spec.resolve_nests(self.alt_names)
        lam = np.array([self.fit.params[f"lambda_{g}"] for g in range(len(groups))])
        return nl_prob(V, NestSpec(groups, lam), dataset.avail)

    def to_jsonable(self) -> dict:
        return {
            "kind": self.spec.kind,
            "name": self.name,
            "utility": {
                "attrs": list(self.spec.utility.attrs),
                "log_attrs": list(self.spec.utility.log_attrs),
                "socio_terms": [list(t) for t in self.spec.utility.socio_terms],
            },
            "nests": None if self.spec.nests is None else [list(g) for g in self.spec.nests],
            "alt_names": list(self.alt_names),
            "attr_names": list(self.attr_names),
            "socio_names": list(self.socio_names),
            "delta": self.delta,
            "theta": [float(v) for v in self.fit.theta],
            "param_names": list(self.fit.param_names),
            "params": self.fit.params,
            "loglik": self.fit.loglik,
            "gradient_norm": self.fit.gradient_norm,
            "converged": self.fit.converged,
            "hessian_condition": self.fit.hessian_condition,
            "n_obs": self.fit.n_obs,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "FittedChoiceModel":
        spec = ChoiceModelSpec(
            utility=UtilitySpec(
                attrs=tuple(d["utility"]["attrs"]),
                log_attrs=tuple(d["utility"]["log_attrs"]),
                socio_terms=tuple(tuple(t) for t in d["utility"]["socio_terms"]),
            ),
            nests=None if d["nests"] is None else tuple(tuple(g) for g in d["nests"]),
        )
        fit = FitResult(
            model_kind=d["kind"],
            param_names=list(d["param_names"]),
            theta=np.asarray(d["theta"]),
            params=dict(d["params"]),
            loglik=float(d["loglik"]),
            gradient_norm=float(d["gradient_norm"]),
            converged=bool(d["converged"]),
            hessian_condition=float(d["hessian_condition"]),
            n_obs=int(d["n_obs"]),
        )
        return cls(d["name"], spec, fit, d["alt_names"], d["attr_names"],
                   d["socio_names"], d["delta"])
