"""Core immutable data model: flow networks, contiguity graphs, region panels,
model specifications, and design-table assembly.

Regions are identified by opaque string codes (FIPS-like). All containers are
immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import datetime as dt
import io
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ColumnError, DataError

RATE_SCALE = 100_000.0

OUTCOMES = ("deaths", "cases")
MODE_PANEL = "panel"
MODE_CROSS_SECTIONAL = "cross-sectional"
RANDOM_LEVELS = ("group", "region")


def _check_region_code(code) -> str:
    if not isinstance(code, str) or not code:
        raise DataError(f"region code must be a non-empty string, got {code!r}")
    return code


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, order=True)
class Period:
    """A half-month-style reporting window, dates inclusive on both ends."""

    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.end < self.start:
            raise DataError(f"period end {self.end} precedes start {self.start}")

    @property
    def label(self) -> str:
        return f"{self.start.isoformat()}/{self.end.isoformat()}"


def make_periods(start_date: dt.date, period_length_days: int, n_periods: int) -> tuple[Period, ...]:
    """Consecutive non-overlapping periods of equal length starting at start_date."""
    if period_length_days < 1 or n_periods < 1:
        raise DataError("period_length_days and n_periods must be positive")
    periods = []
    for k in range(n_periods):
        start = start_date + dt.timedelta(days=k * period_length_days)
        end = start + dt.timedelta(days=period_length_days - 1)
        periods.append(Period(start, end))
    return tuple(periods)


class FlowNetwork:
    """Weighted directed origin->destination commuter counts.

    Self-flows (origin == destination) may be stored; whether they enter lag
    computations is decided by the exposure functions (excluded by default).
    ``out_total`` caches the sum of all outgoing commuters per origin,
    including any stored self-flow.
    """

    __slots__ = ("edges", "out_total", "_by_origin")

    def __init__(self, edges: Iterable[tuple[str, str, int]]):
        seen = set()
        normalized = []
        for origin, dest, commuters in edges:
            origin = _check_region_code(origin)
            dest = _check_region_code(dest)
            count = int(commuters)
            if count != commuters or count < 0:
                raise DataError(f"commuter count for {origin}->{dest} must be a nonnegative integer, got {commuters!r}")
            if (origin, dest) in seen:
                raise DataError(f"duplicate flow edge {origin}->{dest}")
            seen.add((origin, dest))
            normalized.append((origin, dest, count))
        normalized.sort()
        self.edges = tuple(normalized)
        by_origin: dict[str, list[tuple[str, int]]] = {}
        totals: dict[str, int] = {}
        for origin, dest, count in self.edges:
            by_origin.setdefault(origin, []).append((dest, count))
            totals[origin] = totals.get(origin, 0) + count
        self._by_origin = {o: tuple(pairs) for o, pairs in by_origin.items()}
        self.out_total = dict(totals)

    def destinations(self, origin: str) -> tuple[tuple[str, int], ...]:
        return self._by_origin.get(origin, ())

    @property
    def regions(self) -> frozenset[str]:
        out = set()
        for origin, dest, _ in self.edges:
            out.add(origin)
            out.add(dest)
        return frozenset(out)

    def __eq__(self, other):
        return isinstance(other, FlowNetwork) and self.edges == other.edges

    def __hash__(self):
        return hash(self.edges)

    def __repr__(self):
        return f"FlowNetwork({len(self.edges)} edges, {len(self._by_origin)} origins)"


class ContiguityGraph:
    """Symmetric adjacency between regions; no self-loops."""

    __slots__ = ("adjacency",)

    def __init__(self, adjacency: Mapping[str, Iterable[str]]):
        adj: dict[str, frozenset[str]] = {}
        for region, neighbors in adjacency.items():
            region = _check_region_code(region)
            adj[region] = frozenset(_check_region_code(n) for n in neighbors)
        for region, neighbors in adj.items():
            if region in neighbors:
                raise DataError(f"self-loop on region {region}")
            for n in neighbors:
                if region not in adj.get(n, frozenset()):
                    raise DataError(f"asymmetric adjacency: {n} missing back-edge to {region}")
        self.adjacency = adj

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "ContiguityGraph":
        """Build a symmetrized graph from undirected region pairs."""
        adj: dict[str, set[str]] = {}
        for a, b in pairs:
            a = _check_region_code(a)
            b = _check_region_code(b)
            if a == b:
                raise DataError(f"self-loop on region {a}")
            adj.setdefault(a, set()).add(b)
            adj.setdefault(b, set()).add(a)
        return cls(adj)

    def neighbors(self, region: str) -> frozenset[str]:
        return self.adjacency.get(region, frozenset())

    def is_isolated(self, region: str) -> bool:
        return not self.neighbors(region)

    def pairs(self) -> tuple[tuple[str, str], ...]:
        """Each undirected edge once, lexicographically ordered."""
        out = set()
        for region, neighbors in self.adjacency.items():
            for n in neighbors:
                out.add((region, n) if region < n else (n, region))
        return tuple(sorted(out))

    def __eq__(self, other):
        return isinstance(other, ContiguityGraph) and self.pairs() == other.pairs()

    def __hash__(self):
        return hash(self.pairs())

    def __repr__(self):
        return f"ContiguityGraph({len(self.adjacency)} regions, {len(self.pairs())} edges)"


class Panel:
    """Region x period outcome counts with populations, covariates, and nesting.

    ``deaths`` and ``cases`` hold the clamped (nonnegative) new counts used as
    model outcomes. ``deaths_signed`` / ``cases_signed`` retain the raw signed
    differences of the cumulative series, which feed the own-rate predictor;
    for directly constructed panels they default to the clamped matrices.
    """

    __slots__ = (
        "regions", "periods", "deaths", "cases", "population",
        "covariates", "group", "deaths_signed", "cases_signed",
        "_region_index",
    )

    def __init__(
        self,
        regions: Sequence[str],
        periods: Sequence[Period],
        deaths: np.ndarray,
        cases: np.ndarray,
        population: np.ndarray,
        covariates: Mapping[str, np.ndarray],
        group: Sequence[str],
        deaths_signed: np.ndarray | None = None,
        cases_signed: np.ndarray | None = None,
    ):
        regions = tuple(_check_region_code(r) for r in regions)
        if len(set(regions)) != len(regions):
            raise DataError("region codes must be unique")
        if not regions:
            raise DataError("panel needs at least one region")
        periods = tuple(periods)
        if not periods:
            raise DataError("panel needs at least one period")
        for prev, cur in zip(periods, periods[1:]):
            if cur.start <= prev.end:
                raise DataError(f"periods overlap or are out of order: {prev.label} then {cur.label}")
        shape = (len(regions), len(periods))
        deaths = np.asarray(deaths, dtype=np.int64)
        cases = np.asarray(cases, dtype=np.int64)
        for name, mat in (("deaths", deaths), ("cases", cases)):
            if mat.shape != shape:
                raise DataError(f"{name} matrix has shape {mat.shape}, expected {shape}")
            if (mat < 0).any():
                raise DataError(f"{name} matrix contains negative counts")
        population = np.asarray(population, dtype=np.int64)
        if population.shape != (len(regions),):
            raise DataError(f"population has shape {population.shape}, expected ({len(regions)},)")
        if (population <= 0).any():
            bad = [regions[i] for i in np.nonzero(population <= 0)[0][:5]]
            raise DataError(f"population must be positive for every region; offenders: {bad}")
        group = tuple(str(g) for g in group)
        if len(group) != len(regions) or any(not g for g in group):
            raise DataError("every region needs a non-empty group assignment")
        cov = {}
        for name, col in covariates.items():
            arr = np.asarray(col, dtype=np.float64)
            if arr.shape != (len(regions),):
                raise DataError(f"covariate {name!r} has shape {arr.shape}, expected ({len(regions)},)")
            cov[str(name)] = _readonly(arr)
        if deaths_signed is None:
            deaths_signed = deaths
        if cases_signed is None:
            cases_signed = cases
        deaths_signed = np.asarray(deaths_signed, dtype=np.int64)
        cases_signed = np.asarray(cases_signed, dtype=np.int64)
        if deaths_signed.shape != shape or cases_signed.shape != shape:
            raise DataError("signed matrices must match the outcome matrix shape")

        self.regions = regions
        self.periods = periods
        self.deaths = _readonly(deaths)
        self.cases = _readonly(cases)
        self.population = _readonly(population)
        self.covariates = cov
        self.group = group
        self.deaths_signed = _readonly(deaths_signed)
        self.cases_signed = _readonly(cases_signed)
        self._region_index = {r: i for i, r in enumerate(regions)}

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def period_labels(self) -> tuple[str, ...]:
        return tuple(p.label for p in self.periods)

    def region_index(self, region: str) -> int:
        try:
            return self._region_index[region]
        except KeyError:
            raise DataError(f"unknown region {region!r}") from None

    def outcome_matrix(self, outcome: str, signed: bool = False) -> np.ndarray:
        if outcome == "deaths":
            return self.deaths_signed if signed else self.deaths
        if outcome == "cases":
            return self.cases_signed if signed else self.cases
        raise ColumnError(f"unknown outcome {outcome!r}; expected one of {OUTCOMES}")

    def rate_matrix(self, outcome: str = "cases", signed: bool = True) -> np.ndarray:
        """New-count rates per 100k population, region x period."""
        counts = self.outcome_matrix(outcome, signed=signed).astype(np.float64)
        return counts / self.population[:, None] * RATE_SCALE

    def cumulative_counts(self, outcome: str) -> np.ndarray:
        """Total clamped counts per region across all periods."""
        return self.outcome_matrix(outcome).sum(axis=1)

    def period_dummy_names(self) -> tuple[str, ...]:
        """Dummy column names for every period after the reference (first) one."""
        return tuple(f"period:{p.label}" for p in self.periods[1:])

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            self.regions == other.regions
            and self.periods == other.periods
            and np.array_equal(self.deaths, other.deaths)
            and np.array_equal(self.cases, other.cases)
            and np.array_equal(self.deaths_signed, other.deaths_signed)
            and np.array_equal(self.cases_signed, other.cases_signed)
            and np.array_equal(self.population, other.population)
            and self.group == other.group
            and set(self.covariates) == set(other.covariates)
            and all(np.array_equal(self.covariates[k], other.covariates[k]) for k in self.covariates)
        )

    def __repr__(self):
        return f"Panel({self.n_regions} regions x {self.n_periods} periods, {len(self.covariates)} covariates)"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model definition resolved against a panel's design table."""

    outcome: str
    predictors: tuple[str, ...]
    offset: bool = True
    random_levels: tuple[str, ...] = ("group", "region")
    mode: str = MODE_PANEL

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ColumnError(f"outcome must be one of {OUTCOMES}, got {self.outcome!r}")
        object.__setattr__(self, "predictors", tuple(self.predictors))
        levels = tuple(self.random_levels)
        if levels not in ((), ("group",), ("region",), ("group", "region")):
            raise DataError(
                f"random_levels must be a prefix-nested subset of {RANDOM_LEVELS}, got {levels!r}"
            )
        object.__setattr__(self, "random_levels", levels)
        if self.mode not in (MODE_PANEL, MODE_CROSS_SECTIONAL):
            raise DataError(f"mode must be {MODE_PANEL!r} or {MODE_CROSS_SECTIONAL!r}, got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class DesignTable:
    """Assembled model input: one row per region-period (or region).

    ``X`` always carries an explicit leading intercept column named 'const'.
    """

    y: np.ndarray
    X: np.ndarray
    x_names: tuple[str, ...]
    offset: np.ndarray
    group_codes: np.ndarray
    region_codes: np.ndarray
    group_labels: tuple[str, ...]
    region_labels: tuple[str, ...]
    row_region: tuple[str, ...]
    row_period: tuple[str, ...]
    spec: ModelSpec
    n_dropped_unavailable: int = 0

    def __post_init__(self):
        n = len(self.y)
        for name in ("X", "offset", "group_codes", "region_codes"):
            if len(getattr(self, name)) != n:
                raise DataError(f"design field {name} has wrong length")
        if self.X.shape[1] != len(self.x_names):
            raise DataError("x_names does not match design width")
        object.__setattr__(self, "y", _readonly(np.asarray(self.y, dtype=np.float64)))
        object.__setattr__(self, "X", _readonly(np.asarray(self.X, dtype=np.float64)))
        object.__setattr__(self, "offset", _readonly(np.asarray(self.offset, dtype=np.float64)))
        object.__setattr__(self, "group_codes", _readonly(np.asarray(self.group_codes, dtype=np.int64)))
        object.__setattr__(self, "region_codes", _readonly(np.asarray(self.region_codes, dtype=np.int64)))

    @property
    def n(self) -> int:
        return len(self.y)

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.x_names.index(name)
        except ValueError:
            raise ColumnError(f"design has no column {name!r}") from None
        return self.X[:, j]

    def with_column(self, name: str, values: np.ndarray) -> "DesignTable":
        """A copy of this table with one design column replaced."""
        j = self.x_names.index(name) if name in self.x_names else None
        if j is None:
            raise ColumnError(f"design has no column {name!r}")
        X = self.X.copy()
        X[:, j] = values
        return replace(self, X=X)

    @classmethod
    def from_arrays(
        cls,
        y: np.ndarray,
        X: np.ndarray,
        x_names: Sequence[str],
        offset: np.ndarray | None = None,
        group: Sequence[str] | None = None,
        region: Sequence[str] | None = None,
        spec: ModelSpec | None = None,
        add_intercept: bool = True,
    ) -> "DesignTable":
        """Construct a table directly from arrays (no panel needed)."""
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        names = list(x_names)
        if add_intercept:
            X = np.column_stack([np.ones(len(y)), X])
            names = ["const"] + names
        if offset is None:
            offset = np.zeros(len(y))
        if region is None:
            region = [f"r{i}" for i in range(len(y))]
        if group is None:
            group = list(region)
        group_labels, group_codes = _factorize(group)
        region_labels, region_codes = _factorize(region)
        if spec is None:
            spec = ModelSpec(outcome="cases", predictors=tuple(n for n in names if n != "const"),
                             offset=offset is not None, random_levels=(), mode=MODE_CROSS_SECTIONAL)
        return cls(
            y=y, X=X, x_names=tuple(names), offset=np.asarray(offset, dtype=np.float64),
            group_codes=group_codes, region_codes=region_codes,
            group_labels=group_labels, region_labels=region_labels,
            row_region=tuple(region), row_period=tuple("-" for _ in range(len(y))),
            spec=spec,
        )

    def to_csv_bytes(self, provenance: Mapping | None = None) -> bytes:
        """Deterministic CSV rendering (full-precision floats)."""
        buf = io.StringIO()
        if provenance:
            buf.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
        buf.write("region,period,outcome,offset,group," + ",".join(self.x_names) + "\n")
        for i in range(self.n):
            row = [
                self.row_region[i], self.row_period[i], repr(self.y[i]), repr(self.offset[i]),
                self.group_labels[self.group_codes[i]],
            ]
            row.extend(repr(v) for v in self.X[i])
            buf.write(",".join(row) + "\n")
        return buf.getvalue().encode("utf-8")


def _factorize(labels: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    """Codes in first-appearance order."""
    index: dict[str, int] = {}
    codes = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = str(lab)
        if lab not in index:
            index[lab] = len(index)
        codes[i] = index[lab]
    return tuple(index), codes


def build_design(panel: Panel, exposures, spec: ModelSpec) -> DesignTable:
    """Assemble the design table for a model spec.

    Predictor names resolve against panel covariates, exposure lag columns,
    and generated period dummies (first period is the reference category).
    Rows whose used exposure cells are flagged unavailable (e.g. the first
    period, which has no prior period) are dropped; the count is recorded on
    the returned table. Pure function: identical inputs produce byte-identical
    tables.
    """
    if exposures is not None:
        if getattr(exposures, "mode", None) != spec.mode:
            raise DataError(
                f"exposure columns were built in mode {getattr(exposures, 'mode', None)!r} "
                f"but the spec requires {spec.mode!r}"
            )
        if tuple(exposures.region_order) != panel.regions:
            raise DataError("exposure columns were built for a different region ordering")

    R = panel.n_regions
    if spec.mode == MODE_PANEL:
        T = panel.n_periods
        period_labels = panel.period_labels
    else:
        T = 1
        period_labels = ("cumulative",)

    dummy_names = panel.period_dummy_names() if spec.mode == MODE_PANEL else ()
    exposure_names = tuple(exposures.column_names) if exposures is not None else ()

    def column_matrix(name: str) -> tuple[np.ndarray, np.ndarray | None]:
        """(values R x T, availability mask or None)."""
        if name in panel.covariates:
            return np.repeat(panel.covariates[name][:, None], T, axis=1), None
        if name in exposure_names:
            return exposures.values(name), exposures.available(name)
        if name in dummy_names:
            t = dummy_names.index(name) + 1
            mat = np.zeros((R, T))
            mat[:, t] = 1.0
            return mat, None
        raise ColumnError(
            f"predictor {name!r} not found among covariates {sorted(panel.covariates)}, "
            f"exposure columns {sorted(exposure_names)}, or period dummies"
        )

    mats = []
    avail = np.ones((R, T), dtype=bool)
    for name in spec.predictors:
        mat, mask = column_matrix(name)
        mats.append(mat)
        if mask is not None:
            avail &= mask

    if spec.mode == MODE_PANEL:
        y_mat = panel.outcome_matrix(spec.outcome).astype(np.float64)
    else:
        y_mat = panel.cumulative_counts(spec.outcome).astype(np.float64)[:, None]

    keep = avail.ravel(order="C")
    n_dropped = int((~keep).sum())

    def flat(mat):
        return mat.ravel(order="C")[keep]

    y = flat(y_mat)
    cols = [np.ones(len(y))]
    for name, mat in zip(spec.predictors, mats):
        col = flat(mat)
        if np.isnan(col).any():
            offenders = []
            grid_regions = np.repeat(np.arange(R), T)[keep]
            grid_periods = np.tile(np.arange(T), R)[keep]
            for i in np.nonzero(np.isnan(col))[0][:5]:
                offenders.append(f"{panel.regions[grid_regions[i]]}@{period_labels[grid_periods[i]]}")
            raise DataError(f"NaN in column {name!r} at {offenders}")
        cols.append(col)
    X = np.column_stack(cols)
    x_names = ("const",) + spec.predictors

    pop = np.repeat(panel.population.astype(np.float64)[:, None], T, axis=1)
    offset = np.log(flat(pop)) if spec.offset else np.zeros(len(y))

    grid_regions = np.repeat(np.arange(R), T)[keep]
    grid_periods = np.tile(np.arange(T), R)[keep]
    row_region = tuple(panel.regions[i] for i in grid_regions)
    row_period = tuple(period_labels[t] for t in grid_periods)
    row_group = [panel.group[i] for i in grid_regions]

    group_labels, group_codes = _factorize(row_group)
    region_labels, region_codes = _factorize(list(row_region))

    return DesignTable(
        y=y, X=X, x_names=x_names, offset=offset,
        group_codes=group_codes, region_codes=region_codes,
        group_labels=group_labels, region_labels=region_labels,
        row_region=row_region, row_period=row_period,
        spec=spec, n_dropped_unavailable=n_dropped,
    )
