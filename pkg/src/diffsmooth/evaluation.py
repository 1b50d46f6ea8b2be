"""Disclosure risk and analytic utility of synthetic collections."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DimensionMismatchError, ValidationError
from .geodata import GeoDataset
from .synthesis import SyntheticCollection, check_alignment

SCALES = ("log", "original")


@dataclass(eq=False)
class RiskReport:
    """Per-record fraction of replicates close to the truth."""

    record_ids: tuple
    fractions: np.ndarray
    at_risk: np.ndarray
    criterion: str
    scale: str
    model_kind: str = ""
    included: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.included is None:
            self.included = np.ones(len(self.fractions), dtype=bool)

    def group_means(self) -> dict:
        out = {}
        for name, mask in (("at_risk", self.at_risk), ("not_at_risk", ~self.at_risk),
                           ("all", np.ones_like(self.at_risk))):
            m = mask & self.included
            out[name] = float(self.fractions[m].mean()) if m.any() else float("nan")
        return out

    def fraction_for(self, record_id) -> float:
        ids = [str(r) for r in self.record_ids]
        return float(self.fractions[ids.index(str(record_id))])

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "scale": self.scale,
            "model_kind": self.model_kind,
            "groups": self.group_means(),
            "per_record": [
                {"record_id": rid, "fraction": float(f), "at_risk": bool(a), "included": bool(inc)}
                for rid, f, a, inc in zip(self.record_ids, self.fractions, self.at_risk, self.included)
            ],
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_id", "fraction", "at_risk", "included"])
            for rid, f, a, inc in zip(self.record_ids, self.fractions, self.at_risk, self.included):
                writer.writerow([rid, repr(float(f)), int(a), int(inc)])
        return path


def _on_scale(values, scale):
    if scale not in SCALES:
        raise ValidationError(f"scale must be one of {SCALES}")
    return np.exp(values) if scale == "original" else np.asarray(values)


def _at_risk_mask(at_risk, n):
    if at_risk is None:
        return np.zeros(n, dtype=bool)
    at_risk = np.asarray(at_risk, dtype=bool)
    if at_risk.shape[0] != n:
        raise DimensionMismatchError("at-risk mask length differs from the record count")
    return at_risk


def risk_within_epsilon(syn: SyntheticCollection, ds: GeoDataset, epsilon: float,
                        scale: str = "original", at_risk=None) -> RiskReport:
    """Fraction of replicates with |g(Y_dagger) - g(Y)| <= epsilon."""
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    check_alignment(syn, ds)
    truth = _on_scale(ds.responses, scale)
    reps = _on_scale(syn.replicates, scale)
    frac = np.mean(np.abs(reps - truth) <= epsilon, axis=0)
    return RiskReport(ds.record_ids, frac, _at_risk_mask(at_risk, ds.n),
                      f"within {epsilon:g}", scale, syn.model_kind)


def risk_within_percent(syn: SyntheticCollection, ds: GeoDataset, pct: float,
                        scale: str = "original", at_risk=None) -> RiskReport:
    """Fraction of replicates with |g(Y_dagger) - g(Y)| <= pct * |g(Y)|.

    ``pct`` is a fraction (0.10 for 10%). Records whose true value is zero on
    the comparison scale are excluded with a warning.
    """
    if not pct > 0:
        raise ValidationError("pct must be positive")
    check_alignment(syn, ds)
    truth = _on_scale(ds.responses, scale)
    reps = _on_scale(syn.replicates, scale)
    included = truth != 0
    if not included.all():
        warnings.warn(f"{int((~included).sum())} records with zero true value excluded",
                      RuntimeWarning, stacklevel=2)
    frac = np.mean(np.abs(reps - truth) <= pct * np.abs(truth), axis=0)
    frac = np.where(included, frac, np.nan)
    return RiskReport(ds.record_ids, frac, _at_risk_mask(at_risk, ds.n),
                      f"within {100 * pct:g}%", scale, syn.model_kind, included)


def relative_reduction(before: float, after: float) -> float:
    """1 - after/before; NaN when ``before`` is not positive."""
    if not before > 0:
        return float("nan")
    return 1.0 - after / before


def compare_reports(unrestricted: RiskReport, restricted: RiskReport) -> dict:
    """Relative risk reductions per record and per group."""
    before, after = unrestricted.fractions, restricted.fractions
    with np.errstate(divide="ignore", invalid="ignore"):
        per_record = np.where(before > 0, 1.0 - after / before, np.nan)
    gb, ga = unrestricted.group_means(), restricted.group_means()
    return {
        "per_record": per_record,
        "groups": {k: relative_reduction(gb[k], ga[k]) for k in gb},
        "group_means_before": gb,
        "group_means_after": ga,
    }


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------

@dataclass
class ReplicateFits:
    estimates: np.ndarray  # (L, k)
    variances: np.ndarray  # (L, k) squared standard errors
    names: tuple = ()


def ols(X, y):
    """Coefficients and their estimated variances (sigma_hat^2 diag((X'X)^-1))."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if np.linalg.matrix_rank(X) < k:
        raise ValidationError("analyst design is rank deficient")
    q, r = np.linalg.qr(X)
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    dof = n - k
    s2 = float(resid @ resid) / dof if dof > 0 else float("nan")
    rinv = np.linalg.inv(r)
    xtx_inv = rinv @ rinv.T
    return coef, s2 * np.diag(xtx_inv)


def fit_analyst_regression(syn: SyntheticCollection, design, names: Sequence[str] = ()) -> ReplicateFits:
    """OLS of each replicate on a fixed design matrix."""
    X = np.asarray(design, dtype=float)
    if X.shape[0] != syn.n:
        raise DimensionMismatchError(f"design has {X.shape[0]} rows, collection has {syn.n} records")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError("analyst design is rank deficient")
    est = np.empty((syn.L, X.shape[1]))
    var = np.empty_like(est)
    for ell in range(syn.L):
        est[ell], var[ell] = ols(X, syn.replicates[ell])
    return ReplicateFits(est, var, tuple(names) or tuple(f"b{k}" for k in range(X.shape[1])))


@dataclass
class UtilityReport:
    qbar: float
    ubar: float
    b: float
    T: float
    df: float
    lower: float
    upper: float
    L: int
    name: str = ""

    def to_dict(self) -> dict:
        return {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                for k, v in self.__dict__.items()}


def combine_partially_synthetic(q, u, level: float = 0.95, name: str = "") -> UtilityReport:
    """Combine L replicate estimates with the partially synthetic data rules.

    qbar = mean(q), b = sample variance of q, ubar = mean(u), T = ubar + b/L,
    df = (L - 1)(1 + L ubar / b)^2, interval qbar +/- t_df sqrt(T). With b = 0
    the normal quantile is used.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    L = q.shape[0]
    if L < 2:
        raise ValidationError("combination rules need at least 2 replicates")
    if u.shape[0] != L:
        raise DimensionMismatchError("q and u lengths differ")
    qbar = float(q.mean())
    b = float(q.var(ddof=1))
    ubar = float(u.mean())
    T = ubar + b / L
    alpha = 1.0 - level
    if b > 0:
        df = (L - 1) * (1.0 + L * ubar / b) ** 2
        crit = float(stats.t.ppf(1.0 - alpha / 2, df))
    else:
        df = math.inf
        crit = float(stats.norm.ppf(1.0 - alpha / 2))
    half = crit * math.sqrt(T)
    return UtilityReport(qbar, ubar, b, T, df, qbar - half, qbar + half, L, name)


def utility_report(syn: SyntheticCollection, design, names: Sequence[str] = (),
                   level: float = 0.95) -> list:
    fits = fit_analyst_regression(syn, design, names)
    return [combine_partially_synthetic(fits.estimates[:, k], fits.variances[:, k], level, nm)
            for k, nm in enumerate(fits.names)]


def real_data_intervals(ds: GeoDataset, design, names: Sequence[str] = (), level: float = 0.95) -> list:
    """OLS point estimates and t intervals on the confidential responses."""
    X = np.asarray(design, dtype=float)
    coef, var = ols(X, ds.responses)
    crit = float(stats.t.ppf(0.5 + level / 2, X.shape[0] - X.shape[1]))
    names = tuple(names) or tuple(f"b{k}" for k in range(X.shape[1]))
    return [{"name": nm, "estimate": float(c), "lower": float(c - crit * math.sqrt(v)),
             "upper": float(c + crit * math.sqrt(v))} for nm, c, v in zip(names, coef, var)]


def intervals_overlap(a, b) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def format_utility_table(reports_by_model: dict) -> str:
    """Aligned text table: rows are parameters, columns are models."""
    models = list(reports_by_model)
    names = [r.name for r in next(iter(reports_by_model.values()))]
    width = max(len(n) for n in names + ["Parameter"]) + 2
    lines = ["Parameter".ljust(width) + "".join(m.ljust(26) for m in models)]
    for k, nm in enumerate(names):
        cells = []
        for m in models:
            r = reports_by_model[m][k]
            cells.append(f"{r.qbar:.2f} ({r.lower:.2f}, {r.upper:.2f})".ljust(26))
        lines.append(nm.ljust(width) + "".join(cells))
    return "\n".join(lines)


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, default=_default))
    return path


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return [None if isinstance(v, float) and math.isnan(v) else v for v in o.tolist()]
    raise TypeError(type(o).__name__)
