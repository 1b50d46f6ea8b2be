"""Simulated study and the end-to-end three-model pipeline.

The simulated design follows a log-income surface on the unit square with a
dense cluster of records, a sparse scatter elsewhere, and one isolated
record at (0.51, 0.01).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import evaluation as ev
from .covariance import CovMatrix
from .errors import SeedError, ValidationError
from .geodata import GeoDataset, pairwise_distances, suppress
from .mcmc import Chain, ChainConfig, Priors, fit_restricted, fit_unrestricted, summarize, summarize_values
from .risk import DEFAULT_RHO, OutlierVerdict, RiskProfile, build_profile, continuous_weights, detect_outliers_binary
from .synthesis import SyntheticCollection, offset_design, predict_points, synthesis_rng, synthesize

log = logging.getLogger(__name__)

DENSE_BOX = (0.0, 0.6, 0.2, 1.0)
BUFFER_RADIUS = 0.27
MIN_OUTLIER_GAP = 0.26


@dataclass
class SimConfig:
    n: int = 500
    tau2: float = 0.0625
    sigma2: float = 4.0
    phi: float = 12.7
    intercept: float = 11.0
    slopes: tuple = (0.25, 0.25)
    centers: tuple = (0.25, 0.5)
    outlier_location: tuple = (0.51, 0.01)
    # None draws the outlier's response from the model like every other record
    outlier_response: Optional[float] = 7.08
    dense_fraction: float = 0.97
    seed: int = 0
    max_retries: int = 100

    def __post_init__(self):
        if self.n < 10:
            raise ValidationError("simulation needs n >= 10")
        if not (self.tau2 > 0 and self.sigma2 > 0 and self.phi > 0):
            raise ValidationError("tau2, sigma2 and phi must be positive")
        if not 0.0 <= self.dense_fraction <= 1.0:
            raise ValidationError("dense_fraction must lie in [0, 1]")

    def mean_function(self, locs) -> np.ndarray:
        locs = np.asarray(locs, dtype=float)
        return self.intercept + np.abs(locs - np.asarray(self.centers)) @ np.asarray(self.slopes)

    def analyst_design(self) -> Callable:
        return offset_design(self.centers)


def _sample_region(rng, k, accept, box=(0.0, 1.0, 0.0, 1.0)):
    out = np.empty((0, 2))
    x0, x1, y0, y1 = box
    while out.shape[0] < k:
        cand = np.column_stack([rng.uniform(x0, x1, 4 * k), rng.uniform(y0, y1, 4 * k)])
        out = np.vstack([out, cand[accept(cand)]])
    return out[:k]


def simulate_locations(cfg: SimConfig, rng) -> np.ndarray:
    """n-1 clustered/scattered points plus the outlier as the last record."""
    centre = np.asarray(cfg.outlier_location, dtype=float)
    bx0, bx1, by0, by1 = DENSE_BOX

    def clear(pts):
        return np.hypot(*(pts - centre).T) > BUFFER_RADIUS

    def in_dense(pts):
        return (pts[:, 0] >= bx0) & (pts[:, 0] <= bx1) & (pts[:, 1] >= by0) & (pts[:, 1] <= by1)

    m = cfg.n - 1
    n_dense = int(round(cfg.dense_fraction * m))
    dense = _sample_region(rng, n_dense, clear, DENSE_BOX)
    sparse = _sample_region(rng, m - n_dense, lambda p: clear(p) & ~in_dense(p))
    pts = np.vstack([dense, sparse])
    pts = pts[rng.permutation(m)]
    return np.vstack([pts, centre])


def generate_simulated(cfg: SimConfig = SimConfig()) -> GeoDataset:
    """Draw locations and responses; the isolated record is the last one.

    With ``cfg.outlier_response`` set, the isolated record's response is
    pinned to that value and the remaining spatial effects are drawn from
    the Gaussian-process conditional given its effect.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    for _ in range(cfg.max_retries):
        locs = simulate_locations(cfg, rng)
        gaps = cdist(locs[-1:], locs[:-1]).ravel()
        if gaps.min() > MIN_OUTLIER_GAP:
            break
    else:
        raise SeedError(f"no point pattern with an isolated record after {cfg.max_retries} tries")

    d = pairwise_distances(locs)
    mean = cfg.mean_function(locs)
    eps = math.sqrt(cfg.tau2) * rng.standard_normal(cfg.n)
    if cfg.outlier_response is None:
        w = CovMatrix(cfg.sigma2 * np.exp(-cfg.phi * d), copy=False).chol @ rng.standard_normal(cfg.n)
    else:
        w_last = cfg.outlier_response - mean[-1] - eps[-1]
        k = cfg.sigma2 * np.exp(-cfg.phi * d[:-1, -1])
        cond_mean = k * w_last / cfg.sigma2
        cond_cov = cfg.sigma2 * np.exp(-cfg.phi * d[:-1, :-1]) - np.outer(k, k) / cfg.sigma2
        rest = CovMatrix(cond_cov, copy=False).chol @ rng.standard_normal(cfg.n - 1) + cond_mean
        w = np.append(rest, w_last)
    y = mean + w + eps
    if cfg.outlier_response is not None:
        y[-1] = cfg.outlier_response
    return GeoDataset(locs, y, np.ones((cfg.n, 1)))


# ---------------------------------------------------------------------------
# Three-model experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSettings:
    rho: float = DEFAULT_RHO
    gamma: float = math.inf
    weights: str = "binary"
    epsilon: float = 10_000.0
    pct: float = 0.10
    scale: str = "original"
    run_suppressed: bool = True
    synthesis_seed: Optional[int] = None

    def __post_init__(self):
        if self.weights not in ("binary", "continuous"):
            raise ValidationError("weights must be 'binary' or 'continuous'")
        if not 0 < self.rho < 1:
            raise ValidationError("rho must lie in (0, 1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")


@dataclass(eq=False)
class ExperimentResult:
    dataset: GeoDataset
    chains: dict
    synthetic: dict
    verdict: OutlierVerdict
    profile: RiskProfile
    phi_hat: float
    risk_pct: dict
    risk_eps: dict
    utility: dict
    real_ols: list
    parameter_table: dict
    focus_index: int
    focus_summary: dict
    surface_at_focus: dict
    settings: ExperimentSettings = field(default_factory=ExperimentSettings)
    design_names: tuple = ()

    @property
    def at_risk_ids(self) -> list:
        return [self.dataset.record_ids[i] for i in self.verdict.at_risk_index()]

    def reductions(self, model: str = "restricted") -> dict:
        return {
            "pct": ev.compare_reports(self.risk_pct["unrestricted"], self.risk_pct[model]),
            "eps": ev.compare_reports(self.risk_eps["unrestricted"], self.risk_eps[model]),
        }


def synthesize_suppressed(chain: Chain, fitted: GeoDataset, full: GeoDataset, seed: int = 0,
                          design: Optional[Callable] = None) -> SyntheticCollection:
    """Synthetic collection over all of ``full`` from a fit on a subset.

    Retained records use the usual posterior predictive; suppressed records
    get a kriging predictive draw of their spatial effect at their location.
    """
    fitted_pos = {str(r): k for k, r in enumerate(fitted.record_ids)}
    in_fit = np.array([str(r) in fitted_pos for r in full.record_ids])
    missing = np.flatnonzero(~in_fit)
    d_fit = pairwise_distances(fitted)
    Xfull = full.covariates
    reps = np.empty((len(chain), full.n))
    order = np.array([fitted_pos[str(r)] for r in np.asarray(full.record_ids, dtype=object)[in_fit]])
    d_cross = cdist(full.locations[missing], fitted.locations)
    d_miss = cdist(full.locations[missing], full.locations[missing])
    for ell in range(len(chain)):
        rng = synthesis_rng(seed, ell)
        phi, s2 = float(chain.phi[ell]), float(chain.sigma2[ell])
        corr = CovMatrix(np.exp(-phi * d_fit), copy=False)
        w_full = np.empty(full.n)
        w_full[in_fit] = chain.w[ell][order]
        if missing.size:
            K = np.exp(-phi * d_cross)  # (m, n_fit) correlations
            sol = corr.solve(K.T)
            mean = K @ corr.solve(chain.w[ell])
            cov = s2 * (np.exp(-phi * d_miss) - K @ sol)
            cov = 0.5 * (cov + cov.T)
            w_full[missing] = CovMatrix(cov, copy=False).chol @ rng.standard_normal(missing.size) + mean
        mu = Xfull @ chain.beta[ell]
        reps[ell] = mu + w_full + math.sqrt(chain.tau2[ell]) * rng.standard_normal(full.n)
    return SyntheticCollection(reps, full.record_ids, source="suppressed", model_kind="suppressed")


def parameter_rows(chain: Chain) -> dict:
    s = summarize(chain)
    return {k: s[k] for k in ("beta_0", "sigma2", "tau2", "phi")}


def run_experiment(data, priors: Optional[Priors] = None, config: Optional[ChainConfig] = None,
                   settings: Optional[ExperimentSettings] = None,
                   analyst_design: Optional[Callable] = None, design_names=(),
                   focus_index: Optional[int] = None, surface_design: Optional[Callable] = None,
                   L: Optional[int] = None) -> ExperimentResult:
    """Unrestricted fit, outlier detection, restricted refit, suppressed refit, evaluation.

    ``data`` is a :class:`GeoDataset` or a :class:`SimConfig`. For simulated
    data the analyst design defaults to the generating offsets and the focus
    record to the planted outlier (the last record). ``L`` limits synthesis
    to that many evenly spaced retained draws per chain.
    """
    settings = settings or ExperimentSettings()
    config = config or ChainConfig()
    if isinstance(data, SimConfig):
        sim = data
        ds = generate_simulated(sim)
        analyst_design = analyst_design or sim.analyst_design()
        design_names = design_names or ("intercept", "abs_s1_offset", "abs_s2_offset")
        focus_index = ds.n - 1 if focus_index is None else focus_index
    else:
        ds = data
    if analyst_design is None:
        def analyst_design(points, _ds=ds):
            return _ds.covariates
        design_names = design_names or ("intercept", *ds.covariate_names)
    syn_seed = config.seed if settings.synthesis_seed is None else settings.synthesis_seed

    d = pairwise_distances(ds)
    priors = priors or Priors.default(ds, d)

    log.info("fitting unrestricted model (N=%d)", ds.n)
    unres = fit_unrestricted(ds, priors, replace(config, stream=0), d=d)
    phi_hat = float(np.median(unres.phi))

    verdict = detect_outliers_binary(d, phi_hat, settings.rho)
    weights = verdict if settings.weights == "binary" else continuous_weights(d, phi_hat)
    profile = build_profile(weights, settings.gamma)
    log.info("phi_hat=%.4g, M=%.4g, %d at-risk records", phi_hat, verdict.threshold_M, verdict.count)

    if profile.is_identity:
        # A = I: the restricted model is the unrestricted one, so its chain is reused
        res = replace(unres, model_kind="restricted", gamma=profile.gamma)
    else:
        log.info("fitting restricted model (gamma=%s)", settings.gamma)
        res = fit_restricted(ds, priors, profile, phi_hat, init=unres.last(),
                             config=replace(config, stream=1), d=d)

    chains = {"unrestricted": unres, "restricted": res}
    def for_synthesis(chain):
        return chain if L is None else chain.thinned_to(L)

    synthetic = {
        "unrestricted": synthesize(for_synthesis(unres), ds, seed=syn_seed),
        "restricted": synthesize(for_synthesis(res), ds, profile, seed=syn_seed),
    }
    at_risk_ids = [ds.record_ids[i] for i in verdict.at_risk_index()]
    if settings.run_suppressed and at_risk_ids:
        ds_sup = suppress(ds, at_risk_ids)
        log.info("fitting suppressed model (N=%d)", ds_sup.n)
        sup_priors = Priors.default(ds_sup, pairwise_distances(ds_sup),
                                    sigma2_ig=priors.sigma2_ig, tau2_ig=priors.tau2_ig,
                                    beta_mean=priors.beta_mean, beta_prec=priors.beta_prec,
                                    phi_range=priors.phi_range)
        sup = fit_unrestricted(ds_sup, sup_priors, replace(config, stream=2))
        chains["suppressed"] = sup
        synthetic["suppressed"] = synthesize_suppressed(for_synthesis(sup), ds_sup, ds, seed=syn_seed)

    X_an = np.asarray(analyst_design(ds.locations), dtype=float)
    risk_pct = {m: ev.risk_within_percent(s, ds, settings.pct, settings.scale, verdict.at_risk)
                for m, s in synthetic.items()}
    risk_eps = {m: ev.risk_within_epsilon(s, ds, settings.epsilon, settings.scale, verdict.at_risk)
                for m, s in synthetic.items()}
    utility = {m: ev.utility_report(s, X_an, design_names) for m, s in synthetic.items()}
    real = ev.real_data_intervals(ds, X_an, design_names)

    focus_summary, surface = {}, {}
    if focus_index is not None:
        pt = ds.locations[focus_index:focus_index + 1]
        for m, s in synthetic.items():
            focus_summary[m] = summarize_values(s.replicates[:, focus_index])
        for m in ("unrestricted", "restricted"):
            surface[m] = float(predict_points(chains[m], ds, pt, design=surface_design)[0]) \
                if ds.p == 1 or surface_design is not None else float("nan")

    return ExperimentResult(
        dataset=ds, chains=chains, synthetic=synthetic, verdict=verdict, profile=profile,
        phi_hat=phi_hat, risk_pct=risk_pct, risk_eps=risk_eps, utility=utility, real_ols=real,
        parameter_table={m: parameter_rows(c) for m, c in chains.items()},
        focus_index=focus_index if focus_index is not None else -1,
        focus_summary=focus_summary, surface_at_focus=surface, settings=settings,
        design_names=tuple(design_names),
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_LABELS = {"unrestricted": "Full Unrestricted", "restricted": "Restricted", "suppressed": "Suppressed"}


def _cell(row) -> str:
    return f"{row['median']:.2f} ({row['lower']:.2f}, {row['upper']:.2f})"


def render_parameter_table(result: ExperimentResult) -> str:
    cols = ("beta_0", "sigma2", "tau2")
    lines = ["Model".ljust(20) + "".join(c.ljust(24) for c in cols)]
    for m, rows in result.parameter_table.items():
        lines.append(_LABELS[m].ljust(20) + "".join(_cell(rows[c]).ljust(24) for c in cols))
    return "\n".join(lines)


def parameter_table_rows(result: ExperimentResult) -> list:
    out = []
    for m, rows in result.parameter_table.items():
        for name, r in rows.items():
            out.append({"model": m, "parameter": name, **r})
    return out


def render_utility_table(result: ExperimentResult) -> str:
    text = ev.format_utility_table(result.utility)
    if result.focus_summary:
        cells = []
        for m in result.utility:
            f = result.focus_summary[m]
            cells.append(f"{f['mean']:.2f} ({f['lower']:.2f}, {f['upper']:.2f})".ljust(26))
        width = text.splitlines()[0].index(next(iter(result.utility))) if text else 20
        text += "\n" + "Y_dagger(focus)".ljust(width) + "".join(cells)
    return text


def utility_table_rows(result: ExperimentResult) -> list:
    rows = []
    for m, reports in result.utility.items():
        for r in reports:
            rows.append({"model": m, "parameter": r.name, "estimate": r.qbar, "lower": r.lower,
                         "upper": r.upper, "ubar": r.ubar, "b": r.b, "T": r.T, "df": r.df})
        if result.focus_summary:
            f = result.focus_summary[m]
            rows.append({"model": m, "parameter": "y_dagger_focus", "estimate": f["mean"],
                         "lower": f["lower"], "upper": f["upper"], "ubar": "", "b": "", "T": "",
                         "df": ""})
    return rows


def render_risk_summary(result: ExperimentResult) -> str:
    lines = [f"phi_hat = {result.phi_hat:.4g}; M = {result.verdict.threshold_M:.4g}; "
             f"at-risk records: {result.verdict.count}"]
    for label, reports in (("within pct", result.risk_pct), ("within epsilon", result.risk_eps)):
        lines.append(f"[{label}: {next(iter(reports.values())).criterion}, "
                     f"{result.settings.scale} scale]")
        lines.append("model".ljust(14) + "at_risk".rjust(10) + "not_at_risk".rjust(13) + "focus".rjust(9))
        for m, rep in reports.items():
            g = rep.group_means()
            focus = rep.fractions[result.focus_index] if result.focus_index >= 0 else float("nan")
            lines.append(m.ljust(14) + f"{g['at_risk']:10.3f}{g['not_at_risk']:13.3f}{focus:9.3f}")
    red = result.reductions()["pct"]
    lines.append("relative reduction (pct): at_risk {:.1%}, not_at_risk {:.1%}".format(
        red["groups"]["at_risk"], red["groups"]["not_at_risk"]))
    return "\n".join(lines)
