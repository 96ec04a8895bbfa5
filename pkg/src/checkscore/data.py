"""Tabular cohorts, temporal summaries, frozen feature statistics and group-stratified splits."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    FileUnreadable,
    NonBinaryLabel,
    NonMonotoneTimestamps,
    SchemaMismatch,
    TooFewGroups,
)

DEFAULT_MISSING = ("", "NA")
TEMPORAL_SUMMARIES = ("last", "first", "min", "max", "delta", "pct", "range")
# percentiles exposed to proposers as the aggregate quantile digest
QUANTILE_GRID = tuple(round(0.01 * i, 2) for i in range(1, 100))


class FeatureKind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    BINARY = "binary"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: FeatureKind
    unit: str | None = None
    description: str | None = None


class FeatureCatalog:
    """Ordered, immutable name -> FeatureSpec mapping."""

    def __init__(self, specs: Iterable[FeatureSpec]):
        items = {}
        for spec in specs:
            if spec.name in items:
                raise SchemaMismatch(f"duplicate feature name {spec.name!r}")
            items[spec.name] = spec
        self._specs = items

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "FeatureCatalog":
        """Accept ``{"name": "numeric"}`` or ``{"name": {"kind": ..., "unit": ...}}``."""
        specs = []
        for name, entry in mapping.items():
            if isinstance(entry, str):
                entry = {"kind": entry}
            try:
                kind = FeatureKind(entry["kind"])
            except (KeyError, ValueError, TypeError):
                raise SchemaMismatch(f"feature {name!r}: kind must be numeric, categorical or binary") from None
            specs.append(FeatureSpec(name, kind, entry.get("unit"), entry.get("description")))
        return cls(specs)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureCatalog":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileUnreadable(str(exc)) from exc
        if path.suffix in (".yaml", ".yml"):
            import yaml

            raw = yaml.safe_load(text)
        else:
            raw = json.loads(text)
        if isinstance(raw, dict) and "features" in raw:
            raw = raw["features"]
        if not isinstance(raw, dict):
            raise SchemaMismatch("schema file must map feature names to kinds")
        return cls.from_mapping(raw)

    def to_mapping(self) -> dict:
        out = {}
        for s in self._specs.values():
            entry = {"kind": s.kind.value}
            if s.unit:
                entry["unit"] = s.unit
            if s.description:
                entry["description"] = s.description
            out[s.name] = entry
        return out

    def __contains__(self, name: object) -> bool:
        return name in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    def __getitem__(self, name: str) -> FeatureSpec:
        return self._specs[name]

    @property
    def names(self) -> tuple:
        return tuple(self._specs)

    def kind(self, name: str) -> FeatureKind:
        return self._specs[name].kind

    def of_kind(self, kind: FeatureKind) -> tuple:
        return tuple(s.name for s in self._specs.values() if s.kind is kind)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Column-major cohort table.

    Numeric columns are float64 (NaN where missing), categorical columns are
    object arrays of strings (None where missing) and binary columns are bool
    (False where missing).  ``missing`` holds the authoritative per-cell mask.
    ``split`` tags which partition the rows came from.
    """

    catalog: FeatureCatalog
    columns: Mapping[str, np.ndarray]
    missing: Mapping[str, np.ndarray]
    y: np.ndarray
    groups: np.ndarray
    split: str = "all"

    def __post_init__(self):
        n = len(self.y)
        for name in self.catalog.names:
            if name not in self.columns:
                raise SchemaMismatch(f"column {name!r} missing from dataset")
            if len(self.columns[name]) != n or len(self.missing[name]) != n:
                raise SchemaMismatch(f"column {name!r} has wrong length")
        if len(self.groups) != n:
            raise SchemaMismatch("group vector has wrong length")

    @classmethod
    def from_arrays(
        cls,
        catalog: FeatureCatalog,
        columns: Mapping[str, Sequence],
        y: Sequence[int],
        groups: Sequence | None = None,
        split: str = "all",
    ) -> "Dataset":
        """Build a dataset from Python/numpy columns; ``None`` or NaN marks a missing cell."""
        y_arr = np.asarray(y)
        if y_arr.size and not np.isin(y_arr, (0, 1)).all():
            raise NonBinaryLabel("labels must be 0 or 1")
        n = len(y_arr)
        cols, miss = {}, {}
        for spec in catalog:
            raw = columns[spec.name]
            if len(raw) != n:
                raise SchemaMismatch(f"column {spec.name!r} has {len(raw)} rows, expected {n}")
            cols[spec.name], miss[spec.name] = _coerce_column(spec, raw)
        if groups is None:
            groups = [str(i) for i in range(n)]
        g = np.array([str(v) for v in groups], dtype=object)
        return cls(
            catalog,
            {k: _frozen(v) for k, v in cols.items()},
            {k: _frozen(v) for k, v in miss.items()},
            _frozen(y_arr.astype(np.int8)),
            _frozen(g),
            split,
        )

    @property
    def n(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, rows: Sequence[int] | np.ndarray, split: str | None = None) -> "Dataset":
        idx = np.asarray(rows, dtype=np.intp)
        return Dataset(
            self.catalog,
            {k: _frozen(v[idx]) for k, v in self.columns.items()},
            {k: _frozen(v[idx]) for k, v in self.missing.items()},
            _frozen(self.y[idx]),
            _frozen(self.groups[idx]),
            split if split is not None else self.split,
        )

    def with_columns(self, catalog_extra: FeatureCatalog, columns: Mapping[str, Sequence]) -> "Dataset":
        """Return a dataset with extra columns appended (e.g. temporal summaries)."""
        cat = FeatureCatalog(list(self.catalog) + list(catalog_extra))
        cols, miss = dict(self.columns), dict(self.missing)
        for spec in catalog_extra:
            c, m = _coerce_column(spec, columns[spec.name])
            cols[spec.name], miss[spec.name] = _frozen(c), _frozen(m)
        return Dataset(cat, cols, miss, self.y, self.groups, self.split)

    def column_sum(self, name: str) -> float:
        """Sum over non-missing cells of a numeric or binary column."""
        col, miss = self.columns[name], self.missing[name]
        return float(np.asarray(col, dtype=float)[~miss].sum())


def _is_missing(v: object) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


def _coerce_column(spec: FeatureSpec, raw: Sequence) -> tuple[np.ndarray, np.ndarray]:
    n = len(raw)
    miss = np.array([_is_missing(v) for v in raw], dtype=bool) if n else np.zeros(0, bool)
    if spec.kind is FeatureKind.NUMERIC:
        vals = np.array([np.nan if m else float(v) for v, m in zip(raw, miss)], dtype=float)
        miss |= np.isnan(vals)
        return vals, miss
    if spec.kind is FeatureKind.CATEGORICAL:
        vals = np.array([None if m else str(v) for v, m in zip(raw, miss)], dtype=object)
        return vals, miss
    out = np.zeros(n, dtype=bool)
    for i, (v, m) in enumerate(zip(raw, miss)):
        if m:
            continue
        b = _parse_bool(v)
        if b is None:
            raise SchemaMismatch(f"binary feature {spec.name!r} has non-binary value {v!r}")
        out[i] = b
    return out, miss


_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


def _parse_bool(v: object) -> bool | None:
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, float, np.integer, np.floating)):
        if v in (0, 1):
            return bool(v)
        return None
    s = str(v).strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    try:
        f = float(s)
    except ValueError:
        return None
    return bool(f) if f in (0.0, 1.0) else None


def load_table(
    path: str | Path,
    schema: FeatureCatalog,
    label: str = "label",
    group: str | None = None,
    missing: Sequence[str] = DEFAULT_MISSING,
) -> Dataset:
    """Read a CSV with a header row into a Dataset.

    Cells equal to one of ``missing`` (default: empty or ``NA``) are masked.
    Extra columns not in the schema are ignored; schema columns absent from
    the header raise SchemaMismatch.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaMismatch(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise FileUnreadable(str(exc)) from exc

    header = [h.strip() for h in header]
    pos = {h: i for i, h in enumerate(header)}
    needed = list(schema.names) + [label] + ([group] if group else [])
    absent = [h for h in needed if h not in pos]
    if absent:
        raise SchemaMismatch(f"{path}: header lacks columns {absent}")
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaMismatch(f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")

    sentinel = set(missing)

    def cell(row, name):
        v = row[pos[name]].strip()
        return None if v in sentinel else v

    y = []
    for r, row in enumerate(rows):
        v = cell(row, label)
        b = _parse_bool(v) if v is not None else None
        if b is None:
            raise NonBinaryLabel(f"{path}: row {r + 2} label {row[pos[label]]!r} is not 0/1")
        y.append(int(b))

    columns = {}
    for spec in schema:
        raw = [cell(row, spec.name) for row in rows]
        if spec.kind is FeatureKind.NUMERIC:
            try:
                raw = [None if v is None else float(v) for v in raw]
            except ValueError as exc:
                raise SchemaMismatch(f"{path}: numeric column {spec.name!r}: {exc}") from None
        columns[spec.name] = raw
    groups = [cell(row, group) for row in rows] if group else None
    if groups is not None and any(g is None for g in groups):
        raise SchemaMismatch(f"{path}: group column {group!r} has empty cells")
    return Dataset.from_arrays(schema, columns, y, groups)


def write_table(path: str | Path, d: Dataset, label: str = "label", group: str | None = "group") -> None:
    """Write a Dataset back to CSV; missing cells are written empty."""
    names = list(d.catalog.names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + [label] + ([group] if group else []))
        for i in range(d.n):
            row = []
            for name in names:
                if d.missing[name][i]:
                    row.append("")
                    continue
                v = d.columns[name][i]
                kind = d.catalog.kind(name)
                if kind is FeatureKind.NUMERIC:
                    row.append(repr(float(v)))
                elif kind is FeatureKind.BINARY:
                    row.append("1" if v else "0")
                else:
                    row.append(v)
            row.append(str(int(d.y[i])))
            if group:
                row.append(d.groups[i])
            w.writerow(row)


# ---------------------------------------------------------------------------
# temporal summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    """Keep measurements with ``index - lookback <= t < index``.

    ``index`` of None means no cut-off (all measurements precede prediction
    time); ``lookback`` of None means an unbounded window.
    """

    lookback: float | None = None


def derive_temporal(
    series: Mapping[str, Mapping[str, Sequence[tuple[float, float]]]],
    index_times: Mapping[str, float] | None = None,
    window: WindowSpec = WindowSpec(),
    variables: Sequence[str] | None = None,
) -> dict[str, dict[str, float]]:
    """Summarise longitudinal measurements into deployable columns.

    ``series[group][variable]`` is a list of ``(time, value)`` pairs in
    strictly increasing time order.  Returns ``{group: {"<var>__<stat>": value}}``
    for stats last, first, min, max, delta (last - first), pct ((last - first) / first)
    and range (max - min).  Summaries whose inputs are absent are NaN; delta,
    pct and range need at least two measurements, pct a non-zero first value.
    """
    if variables is None:
        variables = sorted({v for per in series.values() for v in per})
    out = {}
    for g, per_var in series.items():
        index = None if index_times is None else index_times.get(g)
        row = {}
        for var in variables:
            pts = per_var.get(var, ())
            times = [t for t, _ in pts]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise NonMonotoneTimestamps(f"group {g!r}, variable {var!r}: timestamps not strictly increasing")
            vals = []
            for t, v in pts:
                if index is not None and t >= index:
                    continue
                if index is not None and window.lookback is not None and t < index - window.lookback:
                    continue
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    continue
                vals.append(float(v))
            row.update(_summarise(var, vals))
        out[g] = row
    return out


def _summarise(var: str, vals: list[float]) -> dict[str, float]:
    nan = float("nan")
    s = dict.fromkeys((f"{var}__{k}" for k in TEMPORAL_SUMMARIES), nan)
    if not vals:
        return s
    first, last = vals[0], vals[-1]
    s[f"{var}__first"], s[f"{var}__last"] = first, last
    s[f"{var}__min"], s[f"{var}__max"] = min(vals), max(vals)
    if len(vals) >= 2:
        s[f"{var}__delta"] = last - first
        s[f"{var}__range"] = max(vals) - min(vals)
        if first != 0:
            s[f"{var}__pct"] = (last - first) / first
    return s


def temporal_catalog(variables: Sequence[str], unit: Mapping[str, str] | None = None) -> FeatureCatalog:
    unit = unit or {}
    return FeatureCatalog(
        FeatureSpec(f"{v}__{k}", FeatureKind.NUMERIC, unit.get(v) if k != "pct" else None)
        for v in variables
        for k in TEMPORAL_SUMMARIES
    )


# ---------------------------------------------------------------------------
# frozen statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NumericStats:
    sorted_values: np.ndarray
    mean: float
    std: float
    missing_rate: float

    def quantile(self, q: float) -> float:
        # linear interpolation between order statistics (numpy "linear")
        return float(np.quantile(self.sorted_values, q, method="linear"))


@dataclass(frozen=True)
class FeatureStats:
    """Training-split statistics, frozen at fit time.

    Quantiles use linear interpolation between order statistics and the
    standard deviation uses the sample (n - 1) denominator.  Features whose
    cells are all missing are listed in ``unusable`` and have no numeric entry.
    """

    numeric: Mapping[str, NumericStats]
    categories: Mapping[str, Mapping[str, int]]
    binary_rate: Mapping[str, float]
    missing_rate: Mapping[str, float]
    unusable: frozenset = field(default_factory=frozenset)
    n_rows: int = 0
    split: str = "all"

    def has_numeric(self, name: str) -> bool:
        return name in self.numeric

    def quantile(self, name: str, q: float) -> float:
        return self.numeric[name].quantile(q)

    def mean(self, name: str) -> float:
        return self.numeric[name].mean

    def std(self, name: str) -> float:
        return self.numeric[name].std

    def quantile_grid(self, name: str, grid: Sequence[float] = QUANTILE_GRID) -> list[float]:
        v = self.numeric[name].sorted_values
        return [float(x) for x in np.quantile(v, list(grid), method="linear")]

    def digest(self, name: str) -> dict:
        """Aggregate-only summary of one feature, safe to hand to a proposer."""
        out = {"missing_rate": self.missing_rate[name]}
        if name in self.numeric:
            s = self.numeric[name]
            out.update(
                mean=s.mean,
                std=s.std,
                quantiles={str(q): s.quantile(q) for q in (0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95)},
            )
        elif name in self.categories:
            out["category_counts"] = dict(self.categories[name])
        elif name in self.binary_rate:
            out["positive_rate"] = self.binary_rate[name]
        return out


def fit_feature_stats(d: Dataset) -> FeatureStats:
    if d.n == 0:
        raise ValueError("construction split is empty")
    numeric, cats, brate, mrate = {}, {}, {}, {}
    unusable = set()
    for spec in d.catalog:
        col, miss = d.columns[spec.name], d.missing[spec.name]
        present = ~miss
        k = int(present.sum())
        mrate[spec.name] = 1.0 - k / d.n
        if k == 0:
            unusable.add(spec.name)
            continue
        if spec.kind is FeatureKind.NUMERIC:
            v = np.sort(col[present])
            std = float(np.std(v, ddof=1)) if k > 1 else 0.0
            numeric[spec.name] = NumericStats(_frozen(v), float(np.mean(v)), std, mrate[spec.name])
        elif spec.kind is FeatureKind.CATEGORICAL:
            labels, counts = np.unique(col[present].astype(str), return_counts=True)
            cats[spec.name] = {str(a): int(b) for a, b in zip(labels, counts)}
        else:
            brate[spec.name] = float(col[present].mean())
    return FeatureStats(numeric, cats, brate, mrate, frozenset(unusable), d.n, d.split)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def group_labels(d: Dataset) -> dict[str, int]:
    """Map each group id to its (single) label."""
    labels: dict[str, int] = {}
    for g, yv in zip(d.groups, d.y):
        prev = labels.setdefault(g, int(yv))
        if prev != yv:
            raise SchemaMismatch(f"group {g!r} carries both labels")
    return labels


def _rows_for(d: Dataset, chosen: set) -> np.ndarray:
    return np.flatnonzero(np.fromiter((g in chosen for g in d.groups), dtype=bool, count=d.n))


def _shuffled_by_class(labels: Mapping[str, int], rng: np.random.Generator) -> dict[int, list[str]]:
    by_class = {}
    for cls in (0, 1):
        ids = sorted(g for g, v in labels.items() if v == cls)
        order = rng.permutation(len(ids))
        by_class[cls] = [ids[i] for i in order]
    return by_class


def stratified_group_kfold(d: Dataset, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split rows into ``k`` folds by group, stratified on the group label.

    Group ids are sorted before a seeded shuffle, so assignment depends on ids
    rather than row positions.  Groups of each class are dealt round-robin, so
    per-fold positive-group counts differ by at most one.
    Returns ``[(train_rows, test_rows), ...]`` with sorted row indices.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    labels = group_labels(d)
    if len(labels) < k:
        raise TooFewGroups(f"{len(labels)} groups cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    by_class = _shuffled_by_class(labels, rng)
    fold_groups: list[set] = [set() for _ in range(k)]
    offset = 0
    for cls in (1, 0):
        for i, g in enumerate(by_class[cls]):
            fold_groups[(offset + i) % k].add(g)
        # continue dealing where the previous class stopped to balance fold sizes
        offset = (offset + len(by_class[cls])) % k
    out = []
    for test_groups in fold_groups:
        test = _rows_for(d, test_groups)
        train = np.setdiff1d(np.arange(d.n), test)
        out.append((train, test))
    return out


def inner_split(d: Dataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Group-stratified construction/internal-validation split of a training set."""
    labels = group_labels(d)
    rng = np.random.default_rng(seed)
    by_class = _shuffled_by_class(labels, rng)
    val_groups = set()
    for cls, ids in by_class.items():
        if len(ids) < 2:
            raise TooFewGroups(f"class {cls} has {len(ids)} group(s); need two to split")
        n_val = min(max(1, int(round(val_fraction * len(ids)))), len(ids) - 1)
        val_groups.update(ids[:n_val])
    val = _rows_for(d, val_groups)
    con = np.setdiff1d(np.arange(d.n), val)
    return con, val
