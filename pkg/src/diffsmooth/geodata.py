"""Geocoded microdata: the dataset container, CSV ingestion and distances."""

from __future__ import annotations

import csv
import math
import operator
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InsufficientDataError, ParseError, SchemaError, ValidationError

_FILTER_OPS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass(frozen=True, eq=False)
class GeoDataset:
    """N geocoded records with a response and a covariate matrix.

    ``covariates`` always carries the all-ones intercept as its first column;
    ``covariate_names`` names the remaining columns.
    """

    locations: np.ndarray
    responses: np.ndarray
    covariates: np.ndarray
    record_ids: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self):
        locs = np.array(self.locations, dtype=float)
        y = np.array(self.responses, dtype=float).reshape(-1)
        x = np.array(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if locs.ndim != 2 or locs.shape[1] != 2:
            raise ValidationError("locations must be an N x 2 array")
        n = locs.shape[0]
        if n < 2:
            raise InsufficientDataError(f"need at least 2 records, got {n}")
        if y.shape[0] != n or x.shape[0] != n:
            raise ValidationError(
                f"length mismatch: {n} locations, {y.shape[0]} responses, "
                f"{x.shape[0]} covariate rows"
            )
        if not (np.all(np.isfinite(locs)) and np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValidationError("coordinates, responses and covariates must be finite")
        if not np.all(x[:, 0] == 1.0):
            raise ValidationError("first covariate column must be the all-ones intercept")
        p = x.shape[1]
        if p > n or np.linalg.matrix_rank(x) < p:
            raise ValidationError(f"covariate matrix (p={p}) is not of full column rank")
        ids = tuple(self.record_ids) if len(self.record_ids) else tuple(range(n))
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} record ids for {n} records")
        if len(set(ids)) != n:
            raise ValidationError("record identifiers must be unique")
        names = tuple(self.covariate_names) if len(self.covariate_names) else tuple(
            f"x{k}" for k in range(1, p)
        )
        if len(names) != p - 1:
            raise ValidationError(f"{len(names)} covariate names for {p - 1} non-intercept columns")
        for arr in (locs, y, x):
            arr.setflags(write=False)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "record_ids", ids)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.locations.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def index_of(self, ids) -> np.ndarray:
        lookup = {rid: k for k, rid in enumerate(self.record_ids)}
        try:
            return np.array([lookup[rid] for rid in ids], dtype=int)
        except KeyError as exc:
            raise ValidationError(f"unknown record id {exc.args[0]!r}") from None

    def subset(self, index) -> "GeoDataset":
        index = np.asarray(index, dtype=int)
        return GeoDataset(
            self.locations[index],
            self.responses[index],
            self.covariates[index],
            tuple(self.record_ids[k] for k in index),
            self.covariate_names,
        )

    def with_responses(self, responses) -> "GeoDataset":
        return GeoDataset(
            self.locations, responses, self.covariates, self.record_ids, self.covariate_names
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping used by :func:`load_csv`.

    ``filter`` is ``(column, op, value)`` with op one of ``== != < <= > >=``.
    """

    x: str = "x"
    y: str = "y"
    response: str = "response"
    covariates: tuple = ()
    id_column: Optional[str] = None
    filter: Optional[tuple] = None
    log_response: bool = False
    standardize_covariates: bool = False
    project: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "ColumnSchema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        data = dict(data)
        if "covariates" in data:
            data["covariates"] = tuple(data["covariates"])
        if data.get("filter") is not None:
            data["filter"] = tuple(data["filter"])
            if len(data["filter"]) != 3 or data["filter"][1] not in _FILTER_OPS:
                raise SchemaError(f"bad filter {data['filter']!r}")
        return cls(**data)

    @classmethod
    def for_dataset(cls, ds: GeoDataset) -> "ColumnSchema":
        """Schema that reloads the output of :func:`write_csv` unchanged."""
        return cls(x="x", y="y", response="response", covariates=ds.covariate_names,
                   id_column="record_id")


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric value {text!r} in column {column!r}", row=row) from None


def load_csv(path, schema: ColumnSchema = ColumnSchema()) -> GeoDataset:
    """Read a delimited file into a validated :class:`GeoDataset`.

    Rows failing ``schema.filter`` are dropped before parsing the remaining
    numeric columns. Row numbers in errors count data rows from 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.x, schema.y, schema.response, *schema.covariates]
        if schema.id_column:
            needed.append(schema.id_column)
        if schema.filter:
            needed.append(schema.filter[0])
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")

        locs, ys, xs, ids = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if schema.filter:
                col, op, value = schema.filter
                cell = _parse_float(row[col], row_no, col)
                if not _FILTER_OPS[op](cell, float(value)):
                    continue
            locs.append((_parse_float(row[schema.x], row_no, schema.x),
                         _parse_float(row[schema.y], row_no, schema.y)))
            y = _parse_float(row[schema.response], row_no, schema.response)
            if schema.log_response:
                if y <= 0:
                    raise ParseError(f"cannot log-transform {y}", row=row_no)
                y = math.log(y)
            ys.append(y)
            xs.append([_parse_float(row[c], row_no, c) for c in schema.covariates])
            if schema.id_column:
                ids.append(row[schema.id_column])

    n = len(ys)
    if n < 2:
        raise InsufficientDataError(f"{path}: {n} records remain after filtering")
    locs = np.array(locs, dtype=float)
    if schema.project:
        locs = equirectangular(locs)
    cov = np.array(xs, dtype=float).reshape(n, len(schema.covariates))
    if schema.standardize_covariates and cov.shape[1]:
        sd = cov.std(axis=0, ddof=1)
        if np.any(sd == 0):
            raise ValidationError("cannot standardize a constant covariate")
        cov = (cov - cov.mean(axis=0)) / sd
    design = np.column_stack([np.ones(n), cov])
    if schema.id_column:
        ids = [_maybe_int(v) for v in ids]
    else:
        ids = list(range(n))
    return GeoDataset(locs, np.array(ys), design, tuple(ids), tuple(schema.covariates))


def _maybe_int(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def equirectangular(lonlat: np.ndarray) -> np.ndarray:
    """Scale longitudes by cos(mean latitude); output stays in degree units."""
    lonlat = np.asarray(lonlat, dtype=float)
    lat0 = math.radians(lonlat[:, 1].mean())
    return np.column_stack([lonlat[:, 0] * math.cos(lat0), lonlat[:, 1]])


def write_csv(ds: GeoDataset, path, extra: Optional[dict] = None) -> Path:
    """Write ``ds`` with a leading ``record_id`` column.

    Floats are written with 17 significant digits so that reloading with
    :meth:`ColumnSchema.for_dataset` reproduces the arrays bit for bit.
    ``extra`` maps column names to length-N arrays appended on the right.
    """
    path = Path(path)
    extra = extra or {}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "x", "y", "response", *ds.covariate_names, *extra])
        for i in range(ds.n):
            writer.writerow([
                ds.record_ids[i],
                repr(float(ds.locations[i, 0])),
                repr(float(ds.locations[i, 1])),
                repr(float(ds.responses[i])),
                *(repr(float(v)) for v in ds.covariates[i, 1:]),
                *(repr(float(col[i])) for col in extra.values()),
            ])
    return path


def pairwise_distances(ds) -> np.ndarray:
    """Euclidean distance matrix between record locations (read-only)."""
    locs = ds.locations if isinstance(ds, GeoDataset) else np.asarray(ds, dtype=float)
    d = cdist(locs, locs)
    np.fill_diagonal(d, 0.0)
    d.setflags(write=False)
    return d


def nearest_neighbor_distances(d: np.ndarray) -> np.ndarray:
    n = d.shape[0]
    if n < 2:
        raise InsufficientDataError("nearest neighbour undefined for fewer than 2 records")
    masked = np.array(d, dtype=float)
    np.fill_diagonal(masked, np.inf)
    return masked.min(axis=1)


def suppress(ds: GeoDataset, ids: Sequence) -> GeoDataset:
    """Copy of ``ds`` without the listed records."""
    drop = set(ds.index_of(list(ids)).tolist())
    keep = [k for k in range(ds.n) if k not in drop]
    if len(keep) < 2:
        raise InsufficientDataError(f"only {len(keep)} records left after suppression")
    return ds.subset(keep)
