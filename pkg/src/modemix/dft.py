"""Decision field theory choice model.

Latent preferences accumulate for ``tau`` deliberation steps,

    P_t = S . P_{t-1} + V_t,        P_0 = 0,
    V_t ~ N(mu, Phi)  i.i.d.,

where mu comes from valence utilities with the same linear-plus-log
specification as the logit family. The constructions are explicit so every
constant is testable:

* feedback  S   = (1 - phi2) * I - phi1 * (ones - I)   (lateral inhibition),
* noise     Phi = noise_sd^2 * (J / (J - 1)) * (I - ones/J)  (unit variance,
  -1/(J-1) cross-correlation; rank J-1).

Choice probabilities are P(preference_j is the maximum) under the Gaussian
accumulated state, evaluated by seeded antithetic quasi-Monte Carlo. During
estimation the hard argmax indicator is replaced by a softmax kernel with a
small bandwidth so the common-random-number likelihood is smooth in the
parameters; reported probabilities always use the hard rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit, ndtri
from scipy.stats import qmc

from .data import ChoiceDataset, ObsRecord
from .errors import ConvergenceError
from .logit import FitResult, LinearUtility, UtilitySpec
from .rngs import stream_seed

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DFTOptions:
    """Process constants and simulation budget for the DFT model."""

    tau: int = 3
    phi1: float = 0.0
    phi2: float = 0.1
    estimate_phi1: bool = False
    estimate_phi2: bool = False
    noise_sd: float = 1.0
    draws: int = 4096
    fit_draws: int = 512
    fit_smoothing: float = 0.1

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0 <= self.phi2 < 1:
            raise ValueError("phi2 must lie in [0, 1)")
        if self.phi1 < 0:
            raise ValueError("phi1 must be >= 0")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be > 0")


@dataclass
class DFTParams:
    """A valence coefficient vector plus the accumulation constants."""

    utility: LinearUtility
    valence_theta: np.ndarray
    tau: int
    phi1: float
    phi2: float
    noise_sd: float


@dataclass
class DFTMoments:
    mean: np.ndarray       # (J,)
    cov: np.ndarray        # (J, J), PSD
    stable: bool
    spectral_radius: float


def feedback_matrix(n_alts: int, phi1: float, phi2: float) -> np.ndarray:
    eye = np.eye(n_alts)
    return (1.0 - phi2) * eye - phi1 * (np.ones((n_alts, n_alts)) - eye)


def noise_cov(n_alts: int, noise_sd: float) -> np.ndarray:
    if n_alts == 1:
        return np.zeros((1, 1))
    eye = np.eye(n_alts)
    centering = eye - np.ones((n_alts, n_alts)) / n_alts
    return noise_sd**2 * (n_alts / (n_alts - 1.0)) * centering


def accumulate_moments(S: np.ndarray, mu: np.ndarray, Phi: np.ndarray, tau: int):
    """mean_tau = sum_k S^k mu and cov_tau = sum_k S^k Phi S^k', by recursion."""
    mean = np.zeros_like(mu)
    cov = np.zeros_like(Phi)
    for _ in range(tau):
        mean = S @ mean + mu
        cov = S @ cov @ S.T + Phi
    return mean, cov


def spectral_radius(S: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(S))))


def dft_moments(params: DFTParams, record: ObsRecord, tau: int | None = None) -> DFTMoments:
    """Accumulated preference moments for one observation, embedded into the
    full alternative space (zeros on unavailable alternatives)."""
    tau = params.tau if tau is None else tau
    av = np.flatnonzero(record.avail)
    j_av = av.size
    V = params.utility.utility_row(params.valence_theta, record)
    S = feedback_matrix(j_av, params.phi1, params.phi2)
    Phi = noise_cov(j_av, params.noise_sd)
    mean_av, cov_av = accumulate_moments(S, V[av], Phi, tau)
    radius = spectral_radius(S)
    # a radius >= 1 makes the accumulated variance non-stationary for large
    # tau; the flag is attached rather than raised so callers can decide
    stable = radius < 1.0
    j = record.avail.size
    mean = np.zeros(j)
    cov = np.zeros((j, j))
    mean[av] = mean_av
    cov[np.ix_(av, av)] = cov_av
    return DFTMoments(mean=mean, cov=cov, stable=stable, spectral_radius=radius)


def standard_normal_qmc(draws: int, dim: int, seed) -> np.ndarray:
    """(draws, dim) standard-normal matrix from scrambled Sobol points with
    antithetic pairing; deterministic per seed."""
    half = max(1, draws // 2)
    rng = np.random.default_rng(seed if not isinstance(seed, int) else stream_seed(seed, "dft-qmc"))
    eng = qmc.Sobol(d=dim, scramble=True, seed=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = eng.random(half)
    u = np.concatenate([u, 1.0 - u], axis=0)
    u = np.clip(u, 1e-13, 1.0 - 1e-13)
    return ndtri(u)


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square-root via eigendecomposition (cov is rank-deficient)."""
    w, U = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    return U * np.sqrt(w)[None, :]


def max_prob_counts(mean: np.ndarray, cov: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """P(coordinate j is the max) by argmax counting over transformed draws."""
    L = _cov_sqrt(cov)
    X = normals @ L.T + mean[None, :]
    counts = np.bincount(np.argmax(X, axis=1), minlength=mean.size)
    return counts / normals.shape[0]


def _floor_renormalize(p: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    p = np.maximum(p, floor)
    return p / p.sum(axis=-1, keepdims=True)


def dft_choice_prob(
    params: DFTParams,
    record: ObsRecord,
    draws: int = 4096,
    seed: int = 0,
    normals: np.ndarray | None = None,
) -> np.ndarray:
    """Choice probabilities for one observation (zeros on unavailable
    alternatives, floored at 1e-12 and renormalized over the available set).

    ``normals`` may supply the (draws, J) standard-normal matrix directly;
    draw column k always belongs to alternative k.
    """
    av = np.flatnonzero(record.avail)
    j = record.avail.size
    out = np.zeros(j)
    if av.size == 1:
        out[av[0]] = 1.0
        return out
    if normals is None:
        normals = standard_normal_qmc(draws, j, seed)
    moments = dft_moments(params, record)
    p = max_prob_counts(moments.mean[av], moments.cov[np.ix_(av, av)], normals[:, av])
    out[av] = _floor_renormalize(p)
    return out


def _availability_patterns(avail: np.ndarray):
    patterns, inverse = np.unique(avail, axis=0, return_inverse=True)
    for k in range(patterns.shape[0]):
        yield np.flatnonzero(patterns[k]), np.flatnonzero(inverse == k)


_CHUNK = 256


def dft_predict_proba(
    utility: LinearUtility,
    valence_theta: np.ndarray,
    opts: DFTOptions,
    dataset: ChoiceDataset,
    seed: int = 0,
    draws: int | None = None,
    normals: np.ndarray | None = None,
) -> np.ndarray:
    """(N, J) hard-QMC choice probabilities at frozen parameters.

    The feedback and noise matrices depend only on the availability pattern,
    so the accumulated covariance (and its square root) is shared within each
    pattern; only the mean shifts per observation.
    """
    draws = opts.draws if draws is None else draws
    n, j = dataset.avail.shape
    if normals is None:
        normals = standard_normal_qmc(draws, j, seed)
    V = utility.utilities(np.asarray(valence_theta, dtype=np.float64), dataset)
    out = np.zeros((n, j))
    for av, idx in _availability_patterns(dataset.avail):
        j_av = av.size
        if j_av == 1:
            out[idx, av[0]] = 1.0
            continue
        S = feedback_matrix(j_av, opts.phi1, opts.phi2)
        Phi = noise_cov(j_av, opts.noise_sd)
        A = np.zeros((j_av, j_av))
        Sk = np.eye(j_av)
        for _ in range(opts.tau):
            A += Sk
            Sk = Sk @ S
        _, cov = accumulate_moments(S, np.zeros(j_av), Phi, opts.tau)
        T = normals[:, av] @ _cov_sqrt(cov).T      # (R, j_av), shared draws
        means = V[np.ix_(idx, av)] @ A.T           # (n_idx, j_av)
        for lo in range(0, idx.size, _CHUNK):
            sel = idx[lo : lo + _CHUNK]
            m = means[lo : lo + _CHUNK]
            scores = T[None, :, :] + m[:, None, :]
            arg = np.argmax(scores, axis=2)
            counts = np.stack([(arg == a).sum(axis=1) for a in range(j_av)], axis=1)
            out[np.ix_(sel, av)] = _floor_renormalize(counts / T.shape[0])
    return out


def _smoothed_ll_grad(
    theta_u: np.ndarray,
    phi1: float,
    phi2: float,
    opts: DFTOptions,
    X: np.ndarray,
    chosen: np.ndarray,
    avail: np.ndarray,
    normals: np.ndarray,
    want_grad: bool,
):
    """Kernel-smoothed simulated log-likelihood; analytic gradient w.r.t. the
    valence coefficients (the phi gradient, when needed, is numeric)."""
    h = opts.fit_smoothing
    V = X @ theta_u
    ll = 0.0
    grad_u = np.zeros_like(theta_u) if want_grad else None
    for av, idx in _availability_patterns(avail):
        j_av = av.size
        if j_av == 1:
            continue  # P(chosen) = 1 contributes nothing
        S = feedback_matrix(j_av, phi1, phi2)
        Phi = noise_cov(j_av, opts.noise_sd)
        A = np.zeros((j_av, j_av))
        Sk = np.eye(j_av)
        for _ in range(opts.tau):
            A += Sk
            Sk = Sk @ S
        _, cov = accumulate_moments(S, np.zeros(j_av), Phi, opts.tau)
        T = normals[:, av] @ _cov_sqrt(cov).T
        means = V[np.ix_(idx, av)] @ A.T
        col_of = {a: k for k, a in enumerate(av)}
        c_local = np.array([col_of[c] for c in chosen[idx]])
        for lo in range(0, idx.size, _CHUNK):
            sel = slice(lo, lo + _CHUNK)
            m = means[sel]
            cl = c_local[sel]
            scores = (T[None, :, :] + m[:, None, :]) / h
            scores -= scores.max(axis=2, keepdims=True)
            e = np.exp(scores)
            s = e / e.sum(axis=2, keepdims=True)       # (b, R, j_av)
            rows = np.arange(m.shape[0])
            sc = s[rows, :, cl]                        # (b, R)
            # an additive guard keeps the objective smooth where p -> 0, so
            # the analytic gradient matches finite differences everywhere
            p = sc.mean(axis=1) + PROB_FLOOR
            ll += np.log(p).sum()
            if want_grad:
                # d p_i / d mean_j = mean_r s_rc (delta_jc - s_rj) / h
                q = -np.einsum("br,brj->bj", sc, s)
                q[rows, cl] += sc.sum(axis=1)
                q /= normals.shape[0] * h
                dmean = q / p[:, None]                 # dLL/dmean (b, j_av)
                dv = dmean @ A                         # chain mean = A @ v
                grad_u += np.einsum("bj,bjp->p", dv, X[np.ix_(idx[sel], av)])
    return ll, grad_u


def estimate_dft(
    dataset: ChoiceDataset,
    valence_spec: UtilitySpec,
    opts: DFTOptions,
    optimizer_cfg=None,
    seed: int = 0,
) -> FitResult:
    """Simulated maximum likelihood for the DFT model.

    The QMC draws are fixed once per call (common random numbers), so the
    objective is deterministic per seed. Valence coefficients use the
    analytic smoothed-likelihood gradient; phi1/phi2, when freed, use central
    differences. The reported log-likelihood is re-evaluated at the hard
    argmax rule with the full ``opts.draws`` budget.
    """
    from .logit import OptimizerConfig, _multistart_minimize

    if dataset.n_obs == 0:
        raise ConvergenceError("cannot estimate on an empty subset")
    cfg = optimizer_cfg or OptimizerConfig(starts=2)
    lu = LinearUtility(valence_spec, dataset.alt_names, dataset.attr_names,
                       dataset.socio_names, dataset.log_delta)
    X = lu.design(dataset)
    normals = standard_normal_qmc(opts.fit_draws, dataset.n_alts, stream_seed(seed, "dft-fit"))
    p_u = lu.n_params
    free_phi1, free_phi2 = opts.estimate_phi1, opts.estimate_phi2
    n_extra = int(free_phi1) + int(free_phi2)

    def unpack(theta):
        k = p_u
        phi1, phi2 = opts.phi1, opts.phi2
        if free_phi1:
            phi1 = float(np.logaddexp(0.0, theta[k]))  # softplus >= 0
            k += 1
        if free_phi2:
            phi2 = float(expit(theta[k]))
        return theta[:p_u], phi1, phi2

    def smoothed_ll(theta, want_grad):
        tu, phi1, phi2 = unpack(theta)
        return _smoothed_ll_grad(tu, phi1, phi2, opts, X, dataset.chosen,
                                 dataset.avail, normals, want_grad)

    def objective(theta):
        ll, gu = smoothed_ll(theta, want_grad=True)
        grad = np.empty(theta.size)
        grad[:p_u] = gu
        for k in range(p_u, theta.size):
            step = 1e-5 * max(1.0, abs(theta[k]))
            up, dn = theta.copy(), theta.copy()
            up[k] += step
            dn[k] -= step
            grad[k] = (smoothed_ll(up, False)[0] - smoothed_ll(dn, False)[0]) / (2 * step)
        return -ll, -grad

    nll, theta_opt, grad = _multistart_minimize(objective, p_u + n_extra, cfg)
    gnorm = float(np.max(np.abs(grad)))
    tu, phi1, phi2 = unpack(theta_opt)

    final_opts = DFTOptions(
        tau=opts.tau, phi1=phi1, phi2=phi2, noise_sd=opts.noise_sd,
        draws=opts.draws, fit_draws=opts.fit_draws, fit_smoothing=opts.fit_smoothing,
    )
    probs = dft_predict_proba(lu, tu, final_opts, dataset, seed=stream_seed(seed, "dft-eval"))
    chosen_p = probs[np.arange(dataset.n_obs), dataset.chosen]
    hard_ll = float(np.log(np.maximum(chosen_p, PROB_FLOOR)).sum())

    names = list(lu.param_names)
    values = list(tu)
    if free_phi1:
        names.append("phi1")
        values.append(phi1)
    if free_phi2:
        names.append("phi2")
        values.append(phi2)
    return FitResult(
        model_kind="dft",
        param_names=names,
        theta=np.asarray(values),
        params={k: float(v) for k, v in zip(names, values)},
        loglik=hard_ll,
        gradient_norm=gnorm,
        converged=bool(gnorm < cfg.gtol),
        hessian_condition=float("nan"),
        n_obs=dataset.n_obs,
    )


class FittedDFTModel:
    """A frozen DFT fit scoring datasets with hard-QMC probabilities."""

    def __init__(self, name: str, valence_spec: UtilitySpec, theta: np.ndarray,
                 opts: DFTOptions, alt_names, attr_names, socio_names,
                 delta: float, seed: int, fit_summary: dict | None = None):
        self.name = name
        self.valence_spec = valence_spec
        self.theta = np.asarray(theta, dtype=np.float64)
        self.opts = opts
        self.alt_names = tuple(alt_names)
        self.attr_names = tuple(attr_names)
        self.socio_names = tuple(socio_names)
        self.delta = float(delta)
        self.seed = int(seed)
        self.fit_summary = fit_summary or {}

    def _lu(self) -> LinearUtility:
        return LinearUtility(self.valence_spec, self.alt_names, self.attr_names,
                             self.socio_names, self.delta)

    def predict_proba(self, dataset: ChoiceDataset) -> np.ndarray:
        return dft_predict_proba(self._lu(), self.theta, self.opts, dataset,
                                 seed=stream_seed(self.seed, "dft-eval"))

    def to_jsonable(self) -> dict:
        return {
            "kind": "dft",
            "name": self.name,
            "valence": {
                "attrs": list(self.valence_spec.attrs),
                "log_attrs": list(self.valence_spec.log_attrs),
                "socio_terms": [list(t) for t in self.valence_spec.socio_terms],
            },
            "theta": [float(v) for v in self.theta],
            "tau": self.opts.tau,
            "phi1": self.opts.phi1,
            "phi2": self.opts.phi2,
            "noise_sd": self.opts.noise_sd,
            "draws": self.opts.draws,
            "alt_names": list(self.alt_names),
            "attr_names": list(self.attr_names),
            "socio_names": list(self.socio_names),
            "delta": self.delta,
            "seed": self.seed,
            "fit_summary": self.fit_summary,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "FittedDFTModel":
        spec = UtilitySpec(
            attrs=tuple(d["valence"]["attrs"]),
            log_attrs=tuple(d["valence"]["log_attrs"]),
            socio_terms=tuple(tuple(t) for t in d["valence"]["socio_terms"]),
        )
        opts = DFTOptions(tau=d["tau"], phi1=d["phi1"], phi2=d["phi2"],
                          noise_sd=d["noise_sd"], draws=d["draws"])
        return cls(d["name"], spec, np.asarray(d["theta"]), opts,
                   d["alt_names"], d["attr_names"], d["socio_names"],
                   d["delta"], d["seed"], d.get("fit_summary"))
