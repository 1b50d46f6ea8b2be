"""Gibbs sampler with a Metropolis step for the spatial range.

Model::

    Y | beta, w, tau2   ~ N(X beta + A w, tau2 I)
    w | sigma2, phi     ~ N(0, sigma2 R(phi)),  R_ij = exp(-phi d_ij)
    beta ~ N(m, P^-1) (P = 0 is flat), sigma2 ~ IG, tau2 ~ IG, phi ~ U(lo, hi)

``A`` is the diagonal smoothing matrix from :mod:`diffsmooth.risk`; the
unrestricted model is ``A = I``. Both fits share one sampler so that the
``A = I`` restricted chain and the unrestricted chain with the same fixed
``phi`` and seed are the same Markov chain, draw for draw.

Per iteration the sampler updates ``(beta, w)`` as one block (beta from its
conditional with ``w`` integrated out, then ``w`` given ``beta``), then
``sigma2``, ``tau2`` and finally ``phi`` by random-walk Metropolis on
``log(phi)``. Set ``ChainConfig.collapse_beta=False`` to draw beta from its
full conditional given ``w`` instead.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .covariance import CovMatrix
from .errors import DimensionMismatchError, DomainError, NumericalError, ValidationError
from .geodata import GeoDataset, pairwise_distances
from .risk import RiskProfile, identity_profile

log = logging.getLogger(__name__)

PARAMS = ("tau2", "sigma2", "phi")
DESK_SCALE_N = 10


@dataclass
class Priors:
    beta_mean: np.ndarray
    beta_prec: np.ndarray
    sigma2_ig: tuple = (2.0, 2.0)
    tau2_ig: tuple = (2.0, 0.1)
    phi_range: tuple = (0.1, 100.0)

    def __post_init__(self):
        self.beta_mean = np.asarray(self.beta_mean, dtype=float).reshape(-1)
        self.beta_prec = np.atleast_2d(np.asarray(self.beta_prec, dtype=float))
        p = self.beta_mean.shape[0]
        if self.beta_prec.shape != (p, p):
            raise ValidationError(f"beta_prec must be {p}x{p}")
        for name in ("sigma2_ig", "tau2_ig"):
            shape, rate = getattr(self, name)
            if not (shape > 0 and rate > 0):
                raise ValidationError(f"{name} shape and rate must be positive")
            setattr(self, name, (float(shape), float(rate)))
        lo, hi = self.phi_range
        if not 0 < lo < hi:
            raise ValidationError(f"phi_range must satisfy 0 < lower < upper, got {self.phi_range}")
        self.phi_range = (float(lo), float(hi))

    @classmethod
    def default(cls, ds: GeoDataset, d=None, **overrides) -> "Priors":
        """Flat beta, IG(2, 2) on sigma2, IG(2, 0.1) on tau2, uniform phi.

        The phi support puts the effective range 3/phi (correlation 0.05)
        between 1% of and the full maximum inter-record distance.
        """
        if d is None:
            d = pairwise_distances(ds)
        dmax = float(np.max(d))
        if dmax <= 0:
            raise ValidationError("all records share one location; phi is not identifiable")
        kw = dict(
            beta_mean=np.zeros(ds.p),
            beta_prec=np.zeros((ds.p, ds.p)),
            phi_range=(3.0 / dmax, 300.0 / dmax),
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "beta_mean": self.beta_mean.tolist(),
            "beta_prec": self.beta_prec.tolist(),
            "sigma2_ig": list(self.sigma2_ig),
            "tau2_ig": list(self.tau2_ig),
            "phi_range": list(self.phi_range),
        }


@dataclass
class ChainConfig:
    n_burn: int = 10_000
    n_iter: int = 50_000
    thin: int = 100
    seed: int = 0
    stream: int = 0
    proposal_sd: float = 0.1
    target_accept: float = 0.40
    adapt_every: int = 50
    collapse_beta: bool = True
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_burn < 0 or self.n_iter < 1 or self.thin < 1:
            raise ValidationError("need n_burn >= 0, n_iter >= 1, thin >= 1")
        if self.n_iter < self.thin:
            raise ValidationError("n_iter must be at least thin to retain a draw")
        if not self.proposal_sd >= 0:
            raise ValidationError("proposal_sd must be nonnegative")
        bad = set(self.fixed) - set(PARAMS)
        if bad:
            raise ValidationError(f"only {PARAMS} can be held fixed, got {sorted(bad)}")

    @property
    def n_keep(self) -> int:
        return self.n_iter // self.thin


@dataclass
class PosteriorSample:
    beta: np.ndarray
    w: np.ndarray
    tau2: float
    sigma2: float
    phi: float

    def copy(self) -> "PosteriorSample":
        return PosteriorSample(self.beta.copy(), self.w.copy(), self.tau2, self.sigma2, self.phi)


@dataclass(eq=False)
class Chain:
    """Retained draws stored column-wise."""

    beta: np.ndarray
    w: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    config: ChainConfig = field(default_factory=ChainConfig)
    acceptance_rate_phi: float = float("nan")
    model_kind: str = "unrestricted"
    record_ids: tuple = ()
    proposal_sd: float = float("nan")
    gamma: float = 0.0

    def __len__(self):
        return self.tau2.shape[0]

    def __getitem__(self, k) -> PosteriorSample:
        return PosteriorSample(self.beta[k], self.w[k], float(self.tau2[k]),
                               float(self.sigma2[k]), float(self.phi[k]))

    @property
    def samples(self):
        return [self[k] for k in range(len(self))]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def n(self) -> int:
        return self.w.shape[1]

    def last(self) -> PosteriorSample:
        return self[len(self) - 1].copy()

    def thinned_to(self, L: int) -> "Chain":
        """Chain restricted to ``L`` evenly spaced retained draws."""
        if not 1 <= L <= len(self):
            raise ValidationError(f"L must lie in [1, {len(self)}], got {L}")
        idx = np.linspace(0, len(self) - 1, L).round().astype(int)
        return replace(self, beta=self.beta[idx], w=self.w[idx], tau2=self.tau2[idx],
                       sigma2=self.sigma2[idx], phi=self.phi[idx])

    def columns(self) -> dict:
        cols = {f"beta_{k}": self.beta[:, k] for k in range(self.p)}
        cols.update(tau2=self.tau2, sigma2=self.sigma2, phi=self.phi)
        return cols


# ---------------------------------------------------------------------------
# Full conditionals. Each takes explicit arrays so the tests can compare them
# against brute-force constructions.
# ---------------------------------------------------------------------------

def _corr_inverse(corr: CovMatrix) -> np.ndarray:
    return corr.inverse()


def w_precision(A, tau2, sigma2, corr_inv) -> np.ndarray:
    """A Sigma_Y^-1 A + Sigma_W^-1 with Sigma_W = sigma2 R."""
    P = corr_inv / sigma2
    P[np.diag_indices_from(P)] += A * A / tau2
    return P


def _factor_precision(P: np.ndarray) -> np.ndarray:
    return CovMatrix(P, copy=False).chol


def w_conditional_moments(resid, A, tau2, sigma2, corr_inv):
    """Mean and covariance of ``w`` given everything else.

    ``resid`` is ``Y - X beta``. Used by :func:`gibbs_step_w` and exposed for
    checking.
    """
    P = w_precision(np.asarray(A, float), tau2, sigma2, corr_inv)
    L = _factor_precision(P)
    mean = cho_solve((L, True), np.asarray(A) * resid / tau2)
    cov = cho_solve((L, True), np.eye(P.shape[0]))
    return mean, cov


def gibbs_step_w(resid, A, tau2, sigma2, corr_inv, rng, L=None):
    """Joint draw of the N spatial effects.

    Records with ``A_ii == 0`` contribute no likelihood term, so their
    coordinates come out as conditional-prior draws given the others.
    """
    A = np.asarray(A, dtype=float)
    if L is None:
        L = _factor_precision(w_precision(A, tau2, sigma2, corr_inv))
    mean = cho_solve((L, True), A * resid / tau2)
    z = rng.standard_normal(A.shape[0])
    return mean + solve_triangular(L, z, lower=True, trans="T", check_finite=False)


def beta_conditional(X, y_adj, tau2, priors: Priors):
    """Mean and covariance of beta given w; ``y_adj`` is ``Y - A w``."""
    prec = X.T @ X / tau2 + priors.beta_prec
    rhs = X.T @ y_adj / tau2 + priors.beta_prec @ priors.beta_mean
    return _gaussian_from_canonical(prec, rhs)


def _gaussian_from_canonical(prec, rhs):
    try:
        V = CovMatrix(prec, copy=False, allow_jitter=False).inverse()
    except NumericalError:
        raise NumericalError("beta posterior is improper: design is rank deficient under a flat prior") from None
    return V @ rhs, V


def gibbs_step_beta(X, y_adj, tau2, priors: Priors, rng):
    mean, V = beta_conditional(X, y_adj, tau2, priors)
    return _mvn(mean, V, rng)


def beta_marginal_conditional(X, Y, A, tau2, L_prec, priors: Priors):
    """Mean and covariance of beta with ``w`` integrated out.

    Uses Woodbury on ``(tau2 I + A Sigma_W A)^-1`` with the factor of the
    ``w`` precision, so no extra N x N factorization is needed.
    """
    AX = A[:, None] * X
    G = solve_triangular(L_prec, AX, lower=True, check_finite=False)
    g = solve_triangular(L_prec, A * Y, lower=True, check_finite=False)
    t4 = tau2 * tau2
    prec = X.T @ X / tau2 - G.T @ G / t4 + priors.beta_prec
    rhs = X.T @ Y / tau2 - G.T @ g / t4 + priors.beta_prec @ priors.beta_mean
    prec = 0.5 * (prec + prec.T)
    return _gaussian_from_canonical(prec, rhs)


def _mvn(mean, V, rng):
    L = CovMatrix(V, copy=False).chol
    return mean + L @ rng.standard_normal(mean.shape[0])


def _inv_gamma(shape, rate, rng) -> float:
    return rate / rng.gamma(shape)


def sigma2_conditional(w, corr: CovMatrix, priors: Priors):
    """Shape and rate of the inverse-gamma full conditional for sigma2."""
    z = solve_triangular(corr.chol, w, lower=True, check_finite=False)
    shape, rate = priors.sigma2_ig
    return shape + 0.5 * w.shape[0], rate + 0.5 * float(z @ z)


def gibbs_step_sigma2(w, corr: CovMatrix, priors: Priors, rng) -> float:
    return _inv_gamma(*sigma2_conditional(w, corr, priors), rng)


def tau2_conditional(Y, mu, A, w, priors: Priors):
    r = Y - mu - A * w
    shape, rate = priors.tau2_ig
    return shape + 0.5 * Y.shape[0], rate + 0.5 * float(r @ r)


def gibbs_step_tau2(Y, mu, A, w, priors: Priors, rng) -> float:
    return _inv_gamma(*tau2_conditional(Y, mu, A, w, priors), rng)


def w_log_density(w, sigma2, corr: CovMatrix) -> float:
    """log N(w | 0, sigma2 R) up to the 2 pi constant."""
    z = solve_triangular(corr.chol, w, lower=True, check_finite=False)
    n = w.shape[0]
    return -0.5 * (n * math.log(sigma2) + 2.0 * float(np.sum(np.log(np.diag(corr.chol))))) \
        - 0.5 * float(z @ z) / sigma2


def phi_log_accept_ratio(w, sigma2, phi, phi_new, d, corr=None, corr_new=None) -> float:
    """Log Metropolis ratio for a random walk on log(phi) under a flat phi prior.

    Includes the log-scale Jacobian ``log(phi_new / phi)``.
    """
    if corr is None:
        corr = CovMatrix(np.exp(-phi * d), copy=False)
    if corr_new is None:
        corr_new = CovMatrix(np.exp(-phi_new * d), copy=False)
    return (w_log_density(w, sigma2, corr_new) - w_log_density(w, sigma2, corr)
            + math.log(phi_new) - math.log(phi))


def metropolis_step_phi(w, sigma2, phi, d, proposal_sd, phi_range, rng, corr=None):
    """One random-walk step on log(phi).

    Returns ``(phi, accepted, corr)`` where ``corr`` is the correlation
    matrix at the returned ``phi``. Proposals outside ``phi_range`` are
    rejected.
    """
    phi_new = phi * math.exp(proposal_sd * rng.standard_normal())
    u = rng.random()
    if corr is None:
        corr = CovMatrix(np.exp(-phi * d), copy=False)
    lo, hi = phi_range
    if not lo <= phi_new <= hi:
        return phi, False, corr
    if phi_new == phi:
        return phi, True, corr
    corr_new = CovMatrix(np.exp(-phi_new * d), copy=False)
    ratio = phi_log_accept_ratio(w, sigma2, phi, phi_new, d, corr, corr_new)
    if not math.isfinite(ratio):
        raise NumericalError(f"non-finite Metropolis ratio at phi={phi_new}")
    if math.log(u) < ratio:
        return phi_new, True, corr_new
    return phi, False, corr


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def default_init(ds: GeoDataset, priors: Priors) -> PosteriorSample:
    X, Y = ds.covariates, ds.responses
    beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    r = Y - X @ beta
    v = max(float(np.var(r)), 1e-8)
    lo, hi = priors.phi_range
    return PosteriorSample(beta=beta, w=0.9 * r, tau2=0.5 * v, sigma2=v,
                           phi=math.sqrt(lo * hi))


def _rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    # substream (0, k) of the user seed is reserved for the k-th chain
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, stream)))


def run_sampler(ds: GeoDataset, priors: Priors, config: ChainConfig,
                profile: Optional[RiskProfile] = None, phi_fixed: Optional[float] = None,
                init: Optional[PosteriorSample] = None, d=None,
                model_kind: str = "unrestricted") -> Chain:
    n, p = ds.n, ds.p
    if priors.beta_mean.shape[0] != p:
        raise DimensionMismatchError(f"priors are for p={priors.beta_mean.shape[0]}, data has p={p}")
    if profile is None:
        profile = identity_profile(n)
    if profile.A_diag.shape[0] != n:
        raise DimensionMismatchError(f"risk profile has {profile.A_diag.shape[0]} records, data has {n}")
    if d is None:
        d = pairwise_distances(ds)
    if n < DESK_SCALE_N or n <= p:
        log.warning("only %d records for %d coefficients; desk-scale inference only", n, p)

    X, Y, A = ds.covariates, ds.responses, np.asarray(profile.A_diag, dtype=float)
    fixed = dict(config.fixed)
    if phi_fixed is not None:
        fixed["phi"] = float(phi_fixed)
    lo, hi = priors.phi_range
    if "phi" in fixed and not lo <= fixed["phi"] <= hi:
        raise DomainError(f"fixed phi {fixed['phi']} outside phi_range {priors.phi_range}")

    state = (init or default_init(ds, priors)).copy()
    if state.w.shape[0] != n or state.beta.shape[0] != p:
        raise DimensionMismatchError("initial state does not match the dataset dimensions")
    for name, value in fixed.items():
        setattr(state, name, float(value))
    state.phi = min(max(state.phi, lo), hi)

    rng = _rng_for(config.seed, config.stream)
    sd = config.proposal_sd
    corr = CovMatrix(np.exp(-state.phi * d), copy=False)
    corr_inv = corr.inverse()

    keep = config.n_keep
    out_beta = np.empty((keep, p))
    out_w = np.empty((keep, n))
    out = {k: np.empty(keep) for k in PARAMS}
    accepted = tried = 0
    window_acc = window_tried = 0
    k = 0
    total = config.n_burn + config.n_iter

    for it in range(1, total + 1):
        # (beta, w) block
        L = _factor_precision(w_precision(A, state.tau2, state.sigma2, corr_inv))
        if config.collapse_beta:
            mean, V = beta_marginal_conditional(X, Y, A, state.tau2, L, priors)
            state.beta = _mvn(mean, V, rng)
            state.w = gibbs_step_w(Y - X @ state.beta, A, state.tau2, state.sigma2, corr_inv, rng, L)
        else:
            state.w = gibbs_step_w(Y - X @ state.beta, A, state.tau2, state.sigma2, corr_inv, rng, L)
            state.beta = gibbs_step_beta(X, Y - A * state.w, state.tau2, priors, rng)
        mu = X @ state.beta

        if "sigma2" not in fixed:
            state.sigma2 = gibbs_step_sigma2(state.w, corr, priors, rng)
        if "tau2" not in fixed:
            state.tau2 = gibbs_step_tau2(Y, mu, A, state.w, priors, rng)

        if "phi" not in fixed:
            phi_new, acc, corr_new = metropolis_step_phi(
                state.w, state.sigma2, state.phi, d, sd, priors.phi_range, rng, corr)
            tried += 1
            window_tried += 1
            if acc:
                accepted += 1
                window_acc += 1
                if corr_new is not corr:
                    corr = corr_new
                    corr_inv = corr.inverse()
                state.phi = phi_new
            if it <= config.n_burn and window_tried == config.adapt_every:
                rate = window_acc / window_tried
                sd *= math.exp(rate - config.target_accept)
                window_acc = window_tried = 0

        if not (np.all(np.isfinite(state.w)) and np.all(np.isfinite(state.beta))
                and math.isfinite(state.tau2) and math.isfinite(state.sigma2)):
            raise NumericalError(f"non-finite state at iteration {it}")

        if it > config.n_burn and (it - config.n_burn) % config.thin == 0:
            out_beta[k] = state.beta
            out_w[k] = state.w
            for name in PARAMS:
                out[name][k] = getattr(state, name)
            k += 1

    return Chain(
        beta=out_beta, w=out_w, config=config,
        acceptance_rate_phi=(accepted / tried) if tried else float("nan"),
        model_kind=model_kind, record_ids=ds.record_ids, proposal_sd=sd,
        gamma=profile.gamma, **out,
    )


def fit_unrestricted(ds: GeoDataset, priors: Optional[Priors] = None,
                     config: Optional[ChainConfig] = None, *, phi_fixed=None, init=None,
                     d=None) -> Chain:
    """Fit the model with A = I, sampling phi unless ``phi_fixed`` is given."""
    if d is None:
        d = pairwise_distances(ds)
    priors = priors or Priors.default(ds, d)
    return run_sampler(ds, priors, config or ChainConfig(), None, phi_fixed, init, d,
                       model_kind="unrestricted")


def fit_restricted(ds: GeoDataset, priors: Optional[Priors], profile: RiskProfile,
                   phi_fixed: float, init: Optional[PosteriorSample] = None,
                   config: Optional[ChainConfig] = None, *, d=None) -> Chain:
    """Fit the differentially smoothed model with phi held at ``phi_fixed``."""
    if d is None:
        d = pairwise_distances(ds)
    priors = priors or Priors.default(ds, d)
    return run_sampler(ds, priors, config or ChainConfig(), profile, phi_fixed, init, d,
                       model_kind="restricted")


# ---------------------------------------------------------------------------
# Summaries and persistence
# ---------------------------------------------------------------------------

def summarize(chain: Chain, quantiles=(0.025, 0.5, 0.975)) -> dict:
    """Per-parameter median and central interval, keyed by parameter name."""
    if len(chain) == 0:
        raise ValidationError("cannot summarize an empty chain")
    table = {}
    for name, col in chain.columns().items():
        qs = np.quantile(col, quantiles)
        table[name] = {"median": float(np.median(col)), "lower": float(qs[0]),
                       "upper": float(qs[-1]), "mean": float(np.mean(col))}
    return table


def summarize_values(values, quantiles=(0.025, 0.975)) -> dict:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValidationError("cannot summarize an empty chain")
    lo, hi = np.quantile(values, quantiles)
    return {"median": float(np.median(values)), "lower": float(lo), "upper": float(hi),
            "mean": float(np.mean(values))}


def save_chain_csv(chain: Chain, path) -> Path:
    """One row per retained draw: beta, tau2, sigma2, phi, then w per record."""
    path = Path(path)
    ids = chain.record_ids or tuple(range(chain.n))
    header = [f"beta_{k}" for k in range(chain.p)] + list(PARAMS) + [f"w_{rid}" for rid in ids]
    body = np.column_stack([chain.beta, chain.tau2, chain.sigma2, chain.phi, chain.w])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in body:
            writer.writerow([repr(float(v)) for v in row])
    return path


def chain_metadata(chain: Chain) -> dict:
    return {
        "model_kind": chain.model_kind,
        "config": asdict(chain.config),
        "acceptance_rate_phi": chain.acceptance_rate_phi,
        "proposal_sd": chain.proposal_sd,
        "gamma": chain.gamma if math.isfinite(chain.gamma) else "inf",
        "n_retained": len(chain),
        "record_ids": list(chain.record_ids),
    }


def save_summary_json(chain: Chain, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    doc = {"summary": summarize(chain), "sampler": chain_metadata(chain)}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def load_chain_csv(path, summary_path=None) -> Chain:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    p = sum(1 for h in header if h.startswith("beta_"))
    if header[p:p + 3] != list(PARAMS):
        raise ValidationError(f"{path}: not a chain file")
    ids = [h[2:] for h in header[p + 3:]]
    body = np.array(rows, dtype=float).reshape(len(rows), len(header))
    kw = {}
    if summary_path is None:
        candidate = path.with_name(path.stem.replace("chain", "summary") + ".json")
        summary_path = candidate if candidate.exists() and candidate != path else None
    if summary_path is not None:
        meta = json.loads(Path(summary_path).read_text())["sampler"]
        cfg = meta["config"]
        kw = dict(config=ChainConfig(**cfg), acceptance_rate_phi=meta["acceptance_rate_phi"],
                  model_kind=meta["model_kind"], proposal_sd=meta["proposal_sd"],
                  gamma=math.inf if meta["gamma"] == "inf" else meta["gamma"])
        ids = meta.get("record_ids", ids)
    return Chain(beta=body[:, :p], w=body[:, p + 3:], tau2=body[:, p], sigma2=body[:, p + 1],
                 phi=body[:, p + 2], record_ids=tuple(ids), **kw)
