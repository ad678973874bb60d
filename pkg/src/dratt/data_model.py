"""Observed-data structure ``(X, R, RA, RY)``: CSV ingestion, covariate
imputation and encoding, and subgroup partitions.

Treatment and outcome are stored as float arrays holding ``nan`` wherever the
follow-up indicator is zero; downstream arithmetic masks them before use.
"""
from __future__ import annotations

import csv
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (CONTINUOUS, BINARY, CATEGORICAL)

NA_VALUES = ("", "NA")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and len(self.levels) < 2:
            raise ConfigError(f"categorical column {self.name!r} needs at least 2 levels")
        if self.kind == CATEGORICAL and len(set(self.levels)) != len(self.levels):
            raise ConfigError(f"categorical column {self.name!r} has repeated levels")

    def encoded_names(self) -> list[str]:
        if self.kind == CATEGORICAL:
            return [f"{self.name}={lvl}" for lvl in self.levels[1:]]
        return [self.name]


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate columns. Categorical levels are listed with the
    reference level first."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate covariate names: {dup}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self):
        return len(self.columns)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"no covariate named {name!r}") from None

    @property
    def one_hot_map(self) -> list[tuple[str, list[str]]]:
        """Encoding plan: each source column paired with the encoded columns it produces."""
        return [(c.name, c.encoded_names()) for c in self.columns]

    @classmethod
    def parse(cls, text: str) -> "CovariateSchema":
        """Parse ``"age:continuous, race:categorical(White|Black|Other), sex:binary"``."""
        items = [s.strip() for s in re.split(r",(?![^(]*\))", text) if s.strip()]
        cols = []
        for item in items:
            name, _, kind = item.partition(":")
            name, kind = name.strip(), (kind.strip() or CONTINUOUS)
            m = re.fullmatch(r"categorical\((.*)\)", kind)
            if m:
                levels = tuple(s.strip() for s in m.group(1).split("|"))
                cols.append(Column(name, CATEGORICAL, levels))
            else:
                cols.append(Column(name, kind))
        return cls(tuple(cols))

    def describe(self) -> str:
        out = []
        for c in self.columns:
            if c.kind == CATEGORICAL:
                out.append(f"{c.name}:categorical({'|'.join(c.levels)})")
            else:
                out.append(f"{c.name}:{c.kind}")
        return ", ".join(out)


@dataclass(frozen=True)
class RoleMap:
    treatment: str
    outcome: str
    followup: str
    group: str | None = None
    id: str | None = None

    def columns(self) -> list[str]:
        return [c for c in (self.id, self.followup, self.treatment, self.outcome, self.group) if c]


@dataclass(frozen=True)
class LoadReport:
    dropped_rows: tuple[tuple[int, str], ...] = ()
    masked_cells: int = 0


@dataclass(frozen=True)
class EncodingParams:
    """Stored encoding so the same transform can be re-applied to new rows."""

    source: CovariateSchema
    means: tuple[float, ...]
    scales: tuple[float, ...]

    def apply(self, x_raw: np.ndarray) -> np.ndarray:
        x_raw = np.asarray(x_raw, dtype=float)
        blocks = []
        for j, col in enumerate(self.source.columns):
            v = x_raw[:, j]
            if col.kind == CONTINUOUS:
                s = self.scales[j]
                blocks.append(((v - self.means[j]) / s if s > 0 else np.zeros_like(v))[:, None])
            elif col.kind == BINARY:
                blocks.append(v[:, None])
            else:
                codes = v.astype(int)
                blocks.append((codes[:, None] == np.arange(1, len(col.levels))[None, :]).astype(float))
        if not blocks:
            return np.zeros((x_raw.shape[0], 0))
        return np.hstack(blocks)


def _frozen(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CausalDataset:
    """Observations ``(X, R, R*A, R*Y)``.

    ``x`` holds covariates column-aligned with ``schema``. Before encoding,
    categorical columns hold integer level codes and missing cells are ``nan``.
    ``raw`` keeps every input column as loaded (strings, ``None`` for missing)
    so filters and age partitions can see values untouched by imputation.
    """

    x: np.ndarray
    r: np.ndarray
    a: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    schema: CovariateSchema
    roles: RoleMap
    group: np.ndarray | None = None
    missing_mask: np.ndarray | None = None
    encoding: EncodingParams | None = None
    raw: Mapping[str, np.ndarray] = field(default_factory=dict)
    outcome_kind: str = BINARY
    load_report: LoadReport | None = None

    def __post_init__(self):
        x = _frozen(self.x, float)
        if x.ndim != 2:
            raise DataError("covariate matrix must be 2-dimensional")
        n = x.shape[0]
        r = _frozen(self.r, np.int8)
        a = _frozen(self.a, float)
        y = _frozen(self.y, float)
        ids = _frozen(self.ids, object)
        for name, arr in (("r", r), ("a", a), ("y", y), ("ids", ids)):
            if arr.shape != (n,):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n},)")
        if x.shape[1] != len(self.schema):
            raise DataError(f"x has {x.shape[1]} columns but schema lists {len(self.schema)}")
        if not np.isin(r, (0, 1)).all():
            raise DataError("follow-up indicator must be 0/1")
        obs = r == 1
        if not np.isin(a[obs], (0.0, 1.0)).all():
            bad = int(np.flatnonzero(obs & ~np.isin(a, (0.0, 1.0)))[0])
            raise DataError(f"row {bad + 1}: treatment must be 0/1 where follow-up is 1")
        if not np.isfinite(y[obs]).all():
            bad = int(np.flatnonzero(obs & ~np.isfinite(y))[0])
            raise DataError(f"row {bad + 1}: outcome missing where follow-up is 1")
        if not (np.isnan(a[~obs]).all() and np.isnan(y[~obs]).all()):
            bad = int(np.flatnonzero(~obs & ~(np.isnan(a) & np.isnan(y)))[0])
            raise DataError(f"row {bad + 1}: treatment/outcome present where follow-up is 0")
        if self.outcome_kind not in (BINARY, "real"):
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        if self.group is not None:
            g = _frozen(self.group, object)
            if g.shape != (n,):
                raise DataError("group labels misaligned with rows")
            object.__setattr__(self, "group", g)
        mask = np.isnan(x) if self.missing_mask is None else self.missing_mask
        object.__setattr__(self, "missing_mask", _frozen(mask, bool))
        object.__setattr__(self, "raw", {k: _frozen(v, object) for k, v in self.raw.items()})

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def covariate_names(self) -> list[str]:
        return self.schema.names

    def raw_column(self, name: str) -> np.ndarray:
        """Column as loaded, as an object array (``None`` where missing)."""
        if name in self.raw:
            return self.raw[name]
        if name in self.schema.names and self.encoding is None:
            j = self.schema.index(name)
            col = self.schema.columns[j]
            vals = self.x[:, j]
            out = np.empty(self.n, dtype=object)
            for i, v in enumerate(vals):
                if math.isnan(v):
                    out[i] = None
                elif col.kind == CATEGORICAL:
                    out[i] = col.levels[int(v)]
                else:
                    out[i] = _fmt_number(v)
            return out
        role_arrays = {self.roles.treatment: self.a, self.roles.outcome: self.y, self.roles.followup: self.r}
        if name in role_arrays:
            return np.array([None if (isinstance(v, float) and math.isnan(v)) else _fmt_number(v)
                             for v in role_arrays[name]], dtype=object)
        raise ConfigError(f"no column named {name!r}")

    def numeric_column(self, name: str) -> np.ndarray:
        vals = self.raw_column(name)
        out = np.full(len(vals), np.nan)
        for i, v in enumerate(vals):
            if v is None:
                continue
            try:
                out[i] = float(v)
            except ValueError:
                pass
        return out

    def subset(self, rows) -> "CausalDataset":
        """Rows selected by a boolean mask or index array, order preserved."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return replace(
            self,
            x=self.x[rows], r=self.r[rows], a=self.a[rows], y=self.y[rows], ids=self.ids[rows],
            group=None if self.group is None else self.group[rows],
            missing_mask=self.missing_mask[rows],
            raw={k: v[rows] for k, v in self.raw.items()},
            load_report=None,
        )


def _fmt_number(v) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _is_na(cell: str, na_values) -> bool:
    return cell.strip() in na_values


def load_csv(
    path: str | Path,
    schema: CovariateSchema,
    roles: RoleMap,
    *,
    lenient: bool = False,
    na_values: Sequence[str] = NA_VALUES,
) -> CausalDataset:
    """Read a CSV into a :class:`CausalDataset`.

    Rows with a missing follow-up indicator are dropped and listed in
    ``load_report``. Treatment or outcome present on a row with ``R=0`` is an
    error unless ``lenient``, in which case those cells are masked.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    needed = roles.columns() + schema.names
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    pos = {h: i for i, h in enumerate(header)}

    x_rows, r_vals, a_vals, y_vals, ids, groups = [], [], [], [], [], []
    raw_cols: dict[str, list] = {h: [] for h in header}
    dropped, masked = [], 0
    for k, row in enumerate(rows, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=k)

        def cell(name):
            return row[pos[name]].strip()

        r_cell = cell(roles.followup)
        if _is_na(r_cell, na_values):
            dropped.append((k, "follow-up indicator missing"))
            continue
        if r_cell not in ("0", "1"):
            raise ParseError(f"follow-up indicator must be 0/1, got {r_cell!r}", k, roles.followup)
        r = int(r_cell)

        a_cell, y_cell = cell(roles.treatment), cell(roles.outcome)
        if r == 0:
            present = [c for c, v in ((roles.treatment, a_cell), (roles.outcome, y_cell))
                       if not _is_na(v, na_values)]
            if present and not lenient:
                raise ParseError("value present where follow-up is 0", k, present[0])
            masked += len(present)
            a, y = math.nan, math.nan
        else:
            if _is_na(a_cell, na_values):
                raise ParseError("treatment missing where follow-up is 1", k, roles.treatment)
            if a_cell not in ("0", "1"):
                raise ParseError(f"treatment must be 0/1, got {a_cell!r}", k, roles.treatment)
            a = float(a_cell)
            if _is_na(y_cell, na_values):
                raise ParseError("outcome missing where follow-up is 1", k, roles.outcome)
            y = _parse_float(y_cell, k, roles.outcome)

        xr = []
        for col in schema.columns:
            c = cell(col.name)
            if _is_na(c, na_values):
                xr.append(math.nan)
            elif col.kind == CATEGORICAL:
                if c not in col.levels:
                    raise ParseError(f"unknown level {c!r} (expected one of {list(col.levels)})", k, col.name)
                xr.append(float(col.levels.index(c)))
            elif col.kind == BINARY:
                v = _parse_float(c, k, col.name)
                if v not in (0.0, 1.0):
                    raise ParseError(f"binary column must be 0/1, got {c!r}", k, col.name)
                xr.append(v)
            else:
                xr.append(_parse_float(c, k, col.name))

        x_rows.append(xr)
        r_vals.append(r)
        a_vals.append(a)
        y_vals.append(y)
        ids.append(cell(roles.id) if roles.id else str(k))
        if roles.group:
            g = cell(roles.group)
            groups.append(None if _is_na(g, na_values) else g)
        for h in header:
            v = row[pos[h]].strip()
            raw_cols[h].append(None if _is_na(v, na_values) else v)

    for k, reason in dropped:
        logger.warning("%s: dropped row %d (%s)", path, k, reason)
    y_obs = np.asarray(y_vals, dtype=float)
    y_obs = y_obs[np.isfinite(y_obs)]
    outcome_kind = BINARY if np.isin(y_obs, (0.0, 1.0)).all() else "real"
    x = np.asarray(x_rows, dtype=float).reshape(len(x_rows), len(schema))
    return CausalDataset(
        x=x,
        r=np.asarray(r_vals, dtype=np.int8),
        a=np.asarray(a_vals, dtype=float),
        y=np.asarray(y_vals, dtype=float),
        ids=np.asarray(ids, dtype=object),
        schema=schema,
        roles=roles,
        group=np.asarray(groups, dtype=object) if roles.group else None,
        raw={h: np.asarray(v, dtype=object) for h, v in raw_cols.items()},
        outcome_kind=outcome_kind,
        load_report=LoadReport(tuple(dropped), masked),
    )


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"cannot parse {cell!r} as a number", row, column) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {cell!r}", row, column)
    return v


def infer_schema(path: str | Path, columns: Iterable[str], na_values: Sequence[str] = NA_VALUES) -> CovariateSchema:
    """Guess column kinds: 0/1 -> binary, numeric -> continuous, else categorical
    with levels in order of first appearance."""
    columns = list(columns)
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        values: dict[str, list[str]] = {c: [] for c in columns}
        for row in reader:
            for c in columns:
                if c not in row:
                    raise DataError(f"{path}: missing column {c!r}")
                v = (row[c] or "").strip()
                if v not in na_values:
                    values[c].append(v)
    cols = []
    for c in columns:
        vals = values[c]
        try:
            nums = {float(v) for v in vals}
        except ValueError:
            levels = tuple(dict.fromkeys(vals))
            cols.append(Column(c, CATEGORICAL, levels))
            continue
        cols.append(Column(c, BINARY if nums <= {0.0, 1.0} else CONTINUOUS))
    return CovariateSchema(tuple(cols))


def save_csv(dataset: CausalDataset, path: str | Path) -> None:
    """Write ``dataset`` in the input layout; ``load_csv`` with the same schema
    and roles reads it back identically."""
    roles = dataset.roles
    cov = dataset.schema.names
    header = []
    if roles.id:
        header.append(roles.id)
    header += cov + [roles.followup, roles.treatment, roles.outcome]
    if roles.group and roles.group not in header:
        header.append(roles.group)
    extras = [h for h in dataset.raw if h not in header]
    header += extras

    cols: dict[str, list[str]] = {}
    if roles.id:
        cols[roles.id] = [str(v) for v in dataset.ids]
    for j, col in enumerate(dataset.schema.columns):
        out = []
        for v in dataset.x[:, j]:
            if math.isnan(v):
                out.append("")
            elif col.kind == CATEGORICAL and dataset.encoding is None:
                out.append(col.levels[int(v)])
            elif col.kind == BINARY:
                out.append(str(int(v)))
            else:
                out.append(repr(float(v)))
        cols[col.name] = out
    cols[roles.followup] = [str(int(v)) for v in dataset.r]
    cols[roles.treatment] = ["" if math.isnan(v) else str(int(v)) for v in dataset.a]
    fmt_y = (lambda v: str(int(v))) if dataset.outcome_kind == BINARY else (lambda v: repr(float(v)))
    cols[roles.outcome] = ["" if math.isnan(v) else fmt_y(v) for v in dataset.y]
    if roles.group and roles.group not in cols:
        cols[roles.group] = ["" if v is None else str(v) for v in dataset.group]
    for h in extras:
        cols[h] = ["" if v is None else str(v) for v in dataset.raw[h]]

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow([cols[h][i] for h in header])


def impute_covariates(dataset: CausalDataset, policy: str = "mode-mean-with-indicator") -> CausalDataset:
    """Fill missing covariates: mean for continuous columns, mode for binary and
    categorical ones (ties go to the lowest code). One 0/1 indicator column
    ``<name>_missing`` is appended per column that had a missing cell."""
    if policy != "mode-mean-with-indicator":
        raise ConfigError(f"unknown imputation policy {policy!r}")
    mask = np.asarray(dataset.missing_mask, dtype=bool) | np.isnan(dataset.x)
    if not mask.any():
        return dataset
    x = np.array(dataset.x)
    indicators, ind_cols = [], []
    for j, col in enumerate(dataset.schema.columns):
        m = mask[:, j]
        if not m.any():
            continue
        seen = x[~m, j]
        if seen.size == 0:
            raise DataError(f"covariate {col.name!r} is entirely missing")
        if col.kind == CONTINUOUS:
            fill = float(seen.mean())
        else:
            vals, counts = np.unique(seen, return_counts=True)
            fill = float(vals[np.argmax(counts)])
        x[m, j] = fill
        indicators.append(m.astype(float))
        ind_cols.append(Column(f"{col.name}_missing", BINARY))
    taken = set(dataset.schema.names)
    for c in ind_cols:
        if c.name in taken:
            raise DataError(f"indicator column name {c.name!r} collides with a covariate")
    schema = CovariateSchema(dataset.schema.columns + tuple(ind_cols))
    x = np.hstack([x, np.column_stack(indicators)])
    return replace(dataset, x=x, schema=schema, missing_mask=np.zeros_like(x, dtype=bool))


def fit_encoding(dataset: CausalDataset) -> EncodingParams:
    means, scales = [], []
    for j, col in enumerate(dataset.schema.columns):
        if col.kind == CONTINUOUS:
            v = dataset.x[:, j]
            means.append(float(v.mean()))
            scales.append(float(v.std()))
        else:
            means.append(0.0)
            scales.append(1.0)
    return EncodingParams(dataset.schema, tuple(means), tuple(scales))


def encode(dataset: CausalDataset, params: EncodingParams | None = None) -> CausalDataset:
    """One-hot categorical columns against their first (reference) level and
    standardize continuous columns with full-sample moments.

    Already-encoded datasets are returned unchanged.
    """
    if dataset.encoding is not None:
        return dataset
    if np.isnan(dataset.x).any():
        raise DataError("encode requires complete covariates; run impute_covariates first")
    if params is None:
        params = fit_encoding(dataset)
    elif params.source != dataset.schema:
        raise ConfigError("encoding parameters were fitted on a different schema")
    for col, s in zip(params.source.columns, params.scales):
        if col.kind == CONTINUOUS and s == 0:
            warnings.warn(f"covariate {col.name!r} has zero variance; encoded as a constant 0",
                          RuntimeWarning, stacklevel=2)
    cols = []
    for col in params.source.columns:
        if col.kind == CONTINUOUS:
            cols.append(Column(col.name, CONTINUOUS))
        else:
            cols += [Column(name, BINARY) for name in col.encoded_names()]
    x = params.apply(dataset.x)
    return replace(dataset, x=x, schema=CovariateSchema(tuple(cols)),
                   missing_mask=np.zeros_like(x, dtype=bool), encoding=params)


@dataclass(frozen=True)
class SubgroupPartition:
    """``assignment[i]`` indexes ``labels``; ``-1`` marks an excluded row."""

    labels: tuple[str, ...]
    assignment: np.ndarray
    excluded: int = 0

    @property
    def counts(self) -> dict[str, int]:
        return {lab: int(np.sum(self.assignment == k)) for k, lab in enumerate(self.labels)}

    @property
    def empty(self) -> tuple[str, ...]:
        return tuple(lab for lab, c in self.counts.items() if c == 0)

    def rows(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.assignment == self.labels.index(label))


def partition_by_age(dataset: CausalDataset, age_column: str, pool_low: int = 12, pool_high: int = 19) -> SubgroupPartition:
    """Age groups ``<=pool_low``, each single year in between, ``>=pool_high``.

    Rows with missing age are excluded (assignment ``-1``). Empty groups are
    kept with count 0 and listed in ``.empty``.
    """
    if pool_high - pool_low < 1:
        raise ConfigError("pool_high must exceed pool_low")
    age = dataset.numeric_column(age_column)
    labels = [f"<={pool_low}"] + [str(a) for a in range(pool_low + 1, pool_high)] + [f">={pool_high}"]
    assign = np.full(dataset.n, -1, dtype=int)
    ok = np.isfinite(age)
    years = np.floor(age[ok]).astype(int)
    assign[ok] = np.clip(years, pool_low, pool_high) - pool_low
    part = SubgroupPartition(tuple(labels), assign, int((~ok).sum()))
    if part.excluded:
        logger.info("partition_by_age: excluded %d rows with missing %s", part.excluded, age_column)
    if part.empty:
        logger.info("partition_by_age: empty groups %s", list(part.empty))
    return part


def partition_by_labels(values: Sequence, order: Sequence[str] | None = None) -> SubgroupPartition:
    """Partition on an arbitrary label column; ``None`` labels are excluded.
    Group order is ``order`` if given, else sorted label order."""
    vals = [None if v is None else str(v) for v in values]
    labels = tuple(order) if order is not None else tuple(sorted({v for v in vals if v is not None}))
    index = {lab: k for k, lab in enumerate(labels)}
    assign = np.array([index.get(v, -1) if v is not None else -1 for v in vals], dtype=int)
    unknown = {v for v in vals if v is not None and v not in index}
    if unknown:
        raise ConfigError(f"labels not in the declared order: {sorted(unknown)}")
    return SubgroupPartition(labels, assign, int(np.sum(assign < 0)))


def covariate_columns(dataset: CausalDataset, names: Iterable[str]) -> list[int]:
    """Indices of the columns of ``dataset.x`` derived from the source
    covariates ``names`` (one-hot levels and missing indicators included)."""
    cols = dataset.schema.names
    out = []
    for name in names:
        hit = [j for j, c in enumerate(cols)
               if c == name or c.startswith(name + "=") or c == name + "_missing"]
        if not hit:
            raise ConfigError(f"no covariate named {name!r}")
        out += hit
    return sorted(set(out))
