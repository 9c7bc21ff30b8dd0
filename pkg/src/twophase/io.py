"""CSV ingestion, column transforms, stratified subsampling and report writing.

CSV conventions: UTF-8, a header row, ``.`` as decimal separator and an
empty field for a missing ``z`` (allowed only where ``r = 0``).  Lines
starting with ``#`` before the header are comments; writers use them to
embed the resolved configuration.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .exceptions import DataError, InputError
from .numerics import WHOLE_LINE, Interval, in_support, rng_stream

TRANSFORMS = ("none", "log", "standardize", "standardize_unit_variance")


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles and per-column transforms of an input file.

    ``transforms`` maps column names to one of ``none``, ``log``,
    ``standardize`` (center) and ``standardize_unit_variance`` (center and
    scale), or to a list of these applied in order.  ``strata`` optionally
    gives the selection support ``D`` as ``(lo, hi]`` pairs.
    """

    y_column: str
    x_columns: tuple
    z_columns: tuple = ()
    r_column: str | None = None
    transforms: dict = field(default_factory=dict)
    strata: tuple = ()

    def __post_init__(self):
        cols = [self.y_column, *self.x_columns, *self.z_columns] + ([self.r_column] if self.r_column else [])
        if len(set(cols)) != len(cols):
            raise InputError("column names in the schema must be unique")
        for col, t in self.transforms.items():
            if col not in cols:
                raise InputError(f"transform given for unknown column {col!r}")
            for step in _steps(t):
                if step not in TRANSFORMS:
                    raise InputError(f"unknown transform {step!r} for column {col!r}")

    @property
    def support(self) -> tuple:
        return strata_intervals(self.strata) if self.strata else WHOLE_LINE

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(d["y"], tuple(d.get("x", ())), tuple(d.get("z", ())), d.get("r"),
                   dict(d.get("transforms", {})), tuple(tuple(s) for s in d.get("strata", ())))


def _steps(t):
    return [t] if isinstance(t, str) else list(t)


def strata_intervals(strata) -> tuple:
    """``(lo, hi]`` pairs (``None`` meaning infinite) to intervals."""
    return tuple(Interval(-math.inf if lo is None else float(lo), math.inf if hi is None else float(hi))
                 for lo, hi in strata)


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not UTF-8: {exc}") from None
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("no data rows (empty file)") from None
    header = [h.strip() for h in header]
    rows = [row for row in reader if row]
    if not rows:
        raise DataError("no data rows")
    return header, rows


def _parse(value, row, column, allow_empty=False):
    v = value.strip()
    if v == "":
        if allow_empty:
            return math.nan
        raise DataError("missing value", row, column)
    try:
        out = float(v)
    except ValueError:
        raise DataError(f"non-numeric value {v!r}", row, column) from None
    if not math.isfinite(out):
        raise DataError(f"non-finite value {v!r}", row, column)
    return out


def load_csv(path, schema: DatasetSchema) -> Dataset:
    """Read and validate a two-phase CSV file.

    Row numbers in errors count data rows from 1.  Without ``r_column``
    every row must be complete and is treated as Phase 2.
    """
    header, rows = _read_rows(path)
    if len(set(header)) != len(header):
        raise DataError("duplicate column names in header")
    pos = {h: j for j, h in enumerate(header)}
    needed = [schema.y_column, *schema.x_columns, *schema.z_columns] + ([schema.r_column] if schema.r_column else [])
    for col in needed:
        if col not in pos:
            raise DataError(f"unknown column; header has {header}", None, col)
    n = len(rows)
    y = np.empty(n)
    x = np.empty((n, len(schema.x_columns)))
    z = np.empty((n, len(schema.z_columns)))
    r = np.ones(n, dtype=np.int8)
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"{len(row)} fields, header has {len(header)}", i, None)
        if schema.r_column:
            rv = _parse(row[pos[schema.r_column]], i, schema.r_column)
            if rv not in (0.0, 1.0):
                raise DataError("r must be 0 or 1", i, schema.r_column)
            r[i - 1] = int(rv)
        y[i - 1] = _parse(row[pos[schema.y_column]], i, schema.y_column)
        for j, c in enumerate(schema.x_columns):
            x[i - 1, j] = _parse(row[pos[c]], i, c)
        for j, c in enumerate(schema.z_columns):
            val = _parse(row[pos[c]], i, c, allow_empty=True)
            if math.isnan(val) and r[i - 1] == 1:
                raise DataError("missing z value where r = 1", i, c)
            z[i - 1, j] = val
    support = schema.support
    outside = np.flatnonzero((r == 1) & ~in_support(y, support))
    if outside.size:
        i = int(outside[0]) + 1
        raise DataError("r = 1 but y outside the selection support", i, schema.y_column)
    return Dataset.from_arrays(y, x, z if schema.z_columns else None, r, support, schema.y_column,
                               schema.x_columns, schema.z_columns)


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_csv(dataset: Dataset, path, r_column: str = "r", comments=()) -> None:
    """Write a dataset so that :func:`load_csv` reproduces it bit for bit."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([dataset.y_name, *dataset.x_names, *dataset.z_names, r_column])
    for i in range(dataset.n):
        w.writerow([_fmt(dataset.y[i]), *map(_fmt, dataset.x[i]), *map(_fmt, dataset.z[i]), int(dataset.r[i])])
    atomic_write(path, buf.getvalue())


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# --------------------------------------------------------------------------
# transforms


@dataclass(frozen=True)
class ColumnTransform:
    name: str
    steps: tuple
    log: bool
    mean: float
    scale: float

    def inverse(self, values):
        v = np.asarray(values, dtype=float) * self.scale + self.mean
        return np.exp(v) if self.log else v


@dataclass(frozen=True)
class TransformRecord:
    """Per-column transform parameters: ``t(v) = (log? v - mean) / scale``."""

    columns: dict

    def to_dict(self) -> dict:
        return {k: {"steps": list(c.steps), "log": c.log, "mean": c.mean, "scale": c.scale}
                for k, c in self.columns.items()}

    def inverse(self, name, values):
        return self.columns[name].inverse(values)


def _transform_column(values, name, steps):
    v = np.asarray(values, dtype=float).copy()
    obs = np.isfinite(v)
    is_log, standardized, mean, scale = False, False, 0.0, 1.0
    for step in steps:
        if step == "none":
            continue
        if step == "log":
            bad = np.flatnonzero(obs & (v <= 0))
            if bad.size:
                raise DataError("log of non-positive value", int(bad[0]) + 1, name)
            v[obs] = np.log(v[obs])
            is_log = True
            continue
        if standardized:
            raise DataError("standardize may be applied once", None, name)
        standardized = True
        sd = float(np.std(v[obs], ddof=1)) if obs.sum() > 1 else 0.0
        if not sd > 0:
            raise DataError("cannot standardize a constant column (zero SD)", None, name)
        mean = float(np.mean(v[obs]))
        scale = sd if step == "standardize_unit_variance" else 1.0
        v[obs] = (v[obs] - mean) / scale
    return v, ColumnTransform(name, tuple(steps), is_log, mean, scale)


def apply_transforms(dataset: Dataset, schema: DatasetSchema):
    """Apply the schema transforms (log first, then centering/scaling).

    Means and SDs of partially observed ``z`` columns use the observed rows.
    Returns the transformed dataset and a :class:`TransformRecord`.
    """
    y, x, z = dataset.y.copy(), dataset.x.copy(), dataset.z.copy()
    record = {}
    for col, t in schema.transforms.items():
        steps = _steps(t)
        if col == dataset.y_name:
            y, record[col] = _transform_column(y, col, steps)
        elif col in dataset.x_names:
            j = dataset.x_names.index(col)
            x[:, j], record[col] = _transform_column(x[:, j], col, steps)
        elif col in dataset.z_names:
            j = dataset.z_names.index(col)
            z[:, j], record[col] = _transform_column(z[:, j], col, steps)
    support = schema.support
    out = Dataset.from_arrays(y, x, z if z.shape[1] else None, dataset.r, support if schema.strata else WHOLE_LINE,
                              dataset.y_name, dataset.x_names, dataset.z_names)
    return out, TransformRecord(record)


# --------------------------------------------------------------------------
# stratified subsampling


@dataclass(frozen=True)
class SubsampleResult:
    dataset: Dataset
    cuts: tuple
    strata: tuple
    sampled: tuple
    alpha: tuple
    counts: dict


def quantile_cuts(values, quantiles) -> tuple:
    cuts = tuple(float(c) for c in np.quantile(np.asarray(values, dtype=float), list(quantiles)))
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise DataError("tied quantile cut points would give an empty stratum")
    return cuts


def stratified_subsample(dataset: Dataset, strata_quantiles=(0.25, 0.75), alpha=(0.4, 0.4),
                         sampled=None, seed: int = 0) -> SubsampleResult:
    """Cut ``y`` at its empirical quantiles and Bernoulli-sample selected strata.

    ``sampled`` lists the stratum indices that are sampled (default: the
    first and the last).  ``alpha`` holds one probability per sampled
    stratum.  ``z`` is masked where ``r = 0``.
    """
    if dataset.z.shape[1] and not np.all(np.isfinite(dataset.z)):
        raise DataError("subsampling needs a complete dataset (all z present)")
    cuts = quantile_cuts(dataset.y, strata_quantiles)
    edges = (-math.inf, *cuts, math.inf)
    strata = tuple(zip(edges[:-1], edges[1:]))
    sampled = (0, len(strata) - 1) if sampled is None else tuple(int(s) for s in sampled)
    if len(alpha) != len(sampled):
        raise InputError("alpha needs one probability per sampled stratum")
    if not all(0 <= a <= 1 for a in alpha):
        raise InputError("alpha must lie in [0, 1]")
    if any(not 0 <= s < len(strata) for s in sampled):
        raise InputError("sampled stratum index out of range")
    which = np.searchsorted(np.asarray(cuts), dataset.y, side="left")
    counts_all = np.bincount(which, minlength=len(strata))
    if np.any(counts_all == 0):
        raise DataError("empty stratum after cutting at the quantiles")
    prob = np.zeros(dataset.n)
    for s, a in zip(sampled, alpha):
        prob[which == s] = a
    rng = rng_stream(seed, 0, "subsample")
    r = (rng.random(dataset.n) < prob).astype(np.int8)
    support = strata_intervals([(None if math.isinf(strata[s][0]) else strata[s][0],
                                 None if math.isinf(strata[s][1]) else strata[s][1]) for s in sampled])
    out = Dataset.from_arrays(dataset.y, dataset.x, dataset.z if dataset.z.shape[1] else None, r, support,
                              dataset.y_name, dataset.x_names, dataset.z_names)
    counts = {"n": int(dataset.n), "phase2": int(r.sum()),
              "per_stratum": [int(c) for c in counts_all],
              "selected_per_stratum": [int(v) for v in np.bincount(which[r == 1], minlength=len(strata))]}
    return SubsampleResult(out, cuts, strata, sampled, tuple(float(a) for a in alpha), counts)
