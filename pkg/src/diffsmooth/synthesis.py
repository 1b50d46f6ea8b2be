"""Partially synthetic responses and kriging prediction surfaces."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .covariance import CovMatrix
from .errors import DimensionMismatchError, ValidationError
from .geodata import GeoDataset, pairwise_distances
from .mcmc import Chain

MODEL_KINDS = ("unrestricted", "restricted", "suppressed")


@dataclass(frozen=True, eq=False)
class SyntheticCollection:
    """L replicate response vectors over the source dataset's records."""

    replicates: np.ndarray
    record_ids: tuple
    source: str = ""
    model_kind: str = "unrestricted"

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ValidationError(f"model_kind must be one of {MODEL_KINDS}")
        reps = np.asarray(self.replicates, dtype=float)
        if reps.ndim != 2 or reps.shape[1] != len(self.record_ids):
            raise DimensionMismatchError(
                f"replicates {reps.shape} do not match {len(self.record_ids)} records")
        if not np.all(np.isfinite(reps)):
            raise ValidationError("synthetic values must be finite")
        reps.setflags(write=False)
        object.__setattr__(self, "replicates", reps)
        object.__setattr__(self, "record_ids", tuple(self.record_ids))

    @property
    def L(self) -> int:
        return self.replicates.shape[0]

    @property
    def n(self) -> int:
        return self.replicates.shape[1]

    def released(self, ds: GeoDataset, ell: int) -> GeoDataset:
        """The ell-th public-use dataset: real locations/covariates, synthetic Y."""
        check_alignment(self, ds)
        return ds.with_responses(self.replicates[ell])


def check_alignment(syn: SyntheticCollection, ds: GeoDataset):
    if syn.n != ds.n:
        raise DimensionMismatchError(f"synthetic collection has {syn.n} records, dataset has {ds.n}")
    if [str(r) for r in syn.record_ids] != [str(r) for r in ds.record_ids]:
        raise DimensionMismatchError("synthetic and real record ids differ")


def synthesis_rng(seed: int, ell: int) -> np.random.Generator:
    """Independent stream for replicate ``ell``; substream 1 of the user seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, ell)))


def synthesize(chain: Chain, ds: GeoDataset, profile=None, seed: int = 0,
               model_kind: Optional[str] = None) -> SyntheticCollection:
    """Draw Y_dagger(l)(s_i) ~ N(x_i' beta(l) + w(l)_i, tau2(l)) for every retained draw.

    The restriction lives in the chain itself: under gamma = inf the at-risk
    coordinates of ``w`` are conditional-prior draws, so the same formula
    (with ``w``, not ``A w``) serves every model. ``profile`` is accepted only
    to validate dimensions.
    """
    if chain.n != ds.n or chain.p != ds.p:
        raise DimensionMismatchError(
            f"chain is for N={chain.n}, p={chain.p}; dataset has N={ds.n}, p={ds.p}")
    if profile is not None and profile.A_diag.shape[0] != ds.n:
        raise DimensionMismatchError("risk profile does not match the dataset")
    mean = chain.beta @ ds.covariates.T + chain.w
    sd = np.sqrt(chain.tau2)
    reps = np.empty_like(mean)
    for ell in range(len(chain)):
        reps[ell] = mean[ell] + sd[ell] * synthesis_rng(seed, ell).standard_normal(ds.n)
    return SyntheticCollection(reps, ds.record_ids, source=chain.model_kind,
                               model_kind=model_kind or chain.model_kind)


def write_synthetic_long(syn: SyntheticCollection, ds: GeoDataset, path) -> Path:
    """Long format: one row per (replicate, record)."""
    check_alignment(syn, ds)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "record_id", "x", "y", *ds.covariate_names, "response"])
        for ell in range(syn.L):
            for i in range(ds.n):
                writer.writerow([
                    ell, ds.record_ids[i], repr(float(ds.locations[i, 0])),
                    repr(float(ds.locations[i, 1])),
                    *(repr(float(v)) for v in ds.covariates[i, 1:]),
                    repr(float(syn.replicates[ell, i])),
                ])
    return path


def read_synthetic_long(path, model_kind="unrestricted") -> SyntheticCollection:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"replicate", "record_id", "response"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: not a long-format synthetic file")
        rows = [(int(r["replicate"]), r["record_id"], float(r["response"])) for r in reader]
    ids = []
    seen = set()
    for _, rid, _ in rows:
        if rid not in seen:
            seen.add(rid)
            ids.append(rid)
    L = max(r[0] for r in rows) + 1
    if len(rows) != L * len(ids):
        raise DimensionMismatchError(f"{path}: ragged synthetic file")
    reps = np.empty((L, len(ids)))
    col = {rid: k for k, rid in enumerate(ids)}
    for ell, rid, v in rows:
        reps[ell, col[rid]] = v
    return SyntheticCollection(reps, tuple(_maybe_int(i) for i in ids), model_kind=model_kind)


def _maybe_int(text):
    try:
        return int(text)
    except ValueError:
        return text


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (len(ys), len(xs))
    quantity: str = "response"

    @property
    def resolution(self):
        return (self.xs.shape[0], self.ys.shape[0])

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def value_at(self, x: float, y: float) -> float:
        """Value at the grid node nearest to (x, y)."""
        i = int(np.argmin(np.abs(self.ys - y)))
        j = int(np.argmin(np.abs(self.xs - x)))
        return float(self.values[i, j])

    def to_csv(self, path) -> Path:
        path = Path(path)
        pts = self.points
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", self.quantity])
            for (x, y), v in zip(pts, self.values.ravel()):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
        return path


def offset_design(centers) -> Callable:
    """Covariates |s1 - c1|, |s2 - c2| (plus intercept) computed from locations."""
    c = np.asarray(centers, dtype=float)

    def design(points):
        points = np.asarray(points, dtype=float)
        return np.column_stack([np.ones(points.shape[0]), np.abs(points - c)])

    design.centers = tuple(c)
    return design


def intercept_design(points):
    return np.ones((np.asarray(points).shape[0], 1))


def kriging_weights(chain: Chain, ds: GeoDataset, d=None) -> np.ndarray:
    """R(phi_l)^-1 w_l for every draw, shape (L, N). Draws sharing phi share a factor."""
    if d is None:
        d = pairwise_distances(ds)
    out = np.empty_like(chain.w)
    cache = {}
    for ell in range(len(chain)):
        phi = float(chain.phi[ell])
        if phi not in cache:
            cache[phi] = CovMatrix(np.exp(-phi * d), copy=False)
        out[ell] = cache[phi].solve(chain.w[ell])
    return out


def predict_points(chain: Chain, ds: GeoDataset, points, design: Optional[Callable] = None,
                   quantity: str = "response", weights=None, batch: int = 2048) -> np.ndarray:
    """Posterior mean over draws of x(s0)'beta + K0' Sigma_W^-1 w at ``points``.

    ``design`` maps an (M, 2) array of locations to an (M, p) covariate
    matrix. With ``quantity='w'`` only the spatial effect is returned and no
    design is needed.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if weights is None:
        weights = kriging_weights(chain, ds)
    vals = np.zeros(points.shape[0])
    phis = chain.phi
    for start in range(0, points.shape[0], batch):
        pts = points[start:start + batch]
        dist = cdist(pts, ds.locations)
        acc = np.zeros(pts.shape[0])
        for phi in np.unique(phis):
            sel = phis == phi
            acc += np.exp(-phi * dist) @ weights[sel].sum(axis=0)
        vals[start:start + batch] = acc / len(chain)
    if quantity == "w":
        return vals
    if design is None:
        if ds.p != 1:
            raise ValidationError(
                "model has covariates that cannot be derived from coordinates; "
                "pass a design or use quantity='w'")
        design = intercept_design
    Xg = np.asarray(design(points), dtype=float)
    if Xg.shape != (points.shape[0], chain.p):
        raise DimensionMismatchError(f"design gives {Xg.shape[1]} columns, chain has p={chain.p}")
    return vals + Xg @ chain.beta.mean(axis=0)


def predict_surface(chain: Chain, ds: GeoDataset, resolution=100, design=None,
                    quantity: str = "response", bounds=None) -> SurfaceGrid:
    """Kriging surface averaged over draws on a grid over the bounding box."""
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nx < 2 or ny < 2:
        raise ValidationError("resolution must be at least 2 per axis")
    if bounds is None:
        (x0, y0), (x1, y1) = ds.locations.min(axis=0), ds.locations.max(axis=0)
    else:
        x0, y0, x1, y1 = bounds
    xs, ys = np.linspace(x0, x1, nx), np.linspace(y0, y1, ny)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals = predict_points(chain, ds, pts, design=design, quantity=quantity)
    return SurfaceGrid(xs, ys, vals.reshape(ny, nx), quantity)
