"""File parsing, panel construction from cumulative series, and derived
covariate indices.

All input files are UTF-8 CSV with a header row. Lines starting with '#' are
treated as comments (artifact files embed provenance that way). Schemas:

    cases file:       region,date,cum_cases,cum_deaths        (date ISO-8601)
    flows file:       origin,dest,commuters
    contiguity file:  region_a,region_b
    covariates file:  region,group,population,<covariate columns...>
"""

from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ClampWarning, DataError, DroppedRegionWarning, ParseError
from .panel import ContiguityGraph, FlowNetwork, Panel, make_periods


@dataclass(frozen=True)
class RawCumulativeSeries:
    """Per-region cumulative case/death counts keyed by date.

    Dates are strictly increasing within each region; counts are nonnegative.
    """

    series: dict  # region -> (tuple[date], np.ndarray cases, np.ndarray deaths)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, dt.date, int, int]]) -> "RawCumulativeSeries":
        per_region: dict[str, list] = {}
        for region, date, cum_cases, cum_deaths in rows:
            if cum_cases < 0 or cum_deaths < 0:
                raise DataError(f"negative cumulative count for {region} on {date}")
            per_region.setdefault(region, []).append((date, int(cum_cases), int(cum_deaths)))
        series = {}
        for region, entries in per_region.items():
            dates = [e[0] for e in entries]
            if any(b <= a for a, b in zip(dates, dates[1:])):
                raise DataError(f"dates for region {region} are not strictly increasing")
            series[region] = (
                tuple(dates),
                np.array([e[1] for e in entries], dtype=np.int64),
                np.array([e[2] for e in entries], dtype=np.int64),
            )
        return cls(series)

    @property
    def regions(self) -> tuple[str, ...]:
        return tuple(self.series)

    def value_at(self, region: str, date: dt.date) -> tuple[int, int]:
        dates, cases, deaths = self.series[region]
        try:
            i = dates.index(date)
        except ValueError:
            raise DataError(f"region {region} has no cumulative value on {date.isoformat()}") from None
        return int(cases[i]), int(deaths[i])


@dataclass(frozen=True)
class CovariateTable:
    """Parsed covariates file: region order, nesting, population, columns."""

    regions: tuple[str, ...]
    group: tuple[str, ...]
    population: np.ndarray
    columns: dict  # name -> np.ndarray


@dataclass(frozen=True)
class PanelBuild:
    """Result of build_panel: the panel plus clamp diagnostics."""

    panel: Panel
    n_clamped_cases: int
    n_clamped_deaths: int


@dataclass(frozen=True)
class FlowParse:
    network: FlowNetwork
    n_dropped: int


@dataclass(frozen=True)
class ContiguityParse:
    graph: ContiguityGraph
    asymmetric_pairs: tuple[tuple[str, str], ...]
    n_dropped: int


def build_panel(
    raw: RawCumulativeSeries,
    period_length_days: int,
    start_date: dt.date,
    n_periods: int,
    covariates: CovariateTable,
    on_unknown: str = "drop",
) -> PanelBuild:
    """Difference cumulative totals at period boundaries into a new-count panel.

    The series must include a value dated the day before ``start_date`` (the
    differencing baseline) and a value on the last day of every period.
    Negative differences (reporting corrections) are clamped to 0 in the
    outcome matrices and counted; the signed differences are kept on the
    panel for the lagged own-rate predictor.
    """
    if on_unknown not in ("drop", "fail"):
        raise DataError("on_unknown must be 'drop' or 'fail'")
    periods = make_periods(start_date, period_length_days, n_periods)
    boundaries = [start_date - dt.timedelta(days=1)] + [p.end for p in periods]

    known = set(covariates.regions)
    extra = [r for r in raw.regions if r not in known]
    if extra:
        if on_unknown == "fail":
            raise DataError(f"cumulative series covers regions not in the covariates file: {extra[:5]}")
        warnings.warn(f"dropping {len(extra)} regions absent from the covariates file", DroppedRegionWarning)

    R, T = len(covariates.regions), n_periods
    cases_signed = np.zeros((R, T), dtype=np.int64)
    deaths_signed = np.zeros((R, T), dtype=np.int64)
    for i, region in enumerate(covariates.regions):
        if region not in raw.series:
            raise DataError(f"region {region} has no cumulative series")
        cums = [raw.value_at(region, b) for b in boundaries]
        for t in range(T):
            cases_signed[i, t] = cums[t + 1][0] - cums[t][0]
            deaths_signed[i, t] = cums[t + 1][1] - cums[t][1]

    n_clamped_cases = int((cases_signed < 0).sum())
    n_clamped_deaths = int((deaths_signed < 0).sum())
    if n_clamped_cases or n_clamped_deaths:
        warnings.warn(
            f"clamped {n_clamped_cases} case and {n_clamped_deaths} death cells with "
            "decreasing cumulative totals",
            ClampWarning,
        )

    panel = Panel(
        regions=covariates.regions,
        periods=periods,
        deaths=np.maximum(deaths_signed, 0),
        cases=np.maximum(cases_signed, 0),
        population=covariates.population,
        covariates=covariates.columns,
        group=covariates.group,
        deaths_signed=deaths_signed,
        cases_signed=cases_signed,
    )
    return PanelBuild(panel, n_clamped_cases, n_clamped_deaths)


# ---------------------------------------------------------------------------
# CSV parsing


def _read_rows(path) -> Iterable[tuple[int, list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (row[0].startswith("#")):
                continue
            yield lineno, [c.strip() for c in row]


def _expect_header(path, got: list[str], want: list[str], prefix_only: bool = False):
    head = got[: len(want)] if prefix_only else got
    if head != want:
        raise ParseError(path, 1, f"expected header {','.join(want)}{',...' if prefix_only else ''}, got {','.join(got)}")


def parse_cases(path) -> RawCumulativeSeries:
    """Parse a cumulative cases/deaths file."""
    rows = []
    header_seen = False
    for lineno, row in _read_rows(path):
        if not header_seen:
            _expect_header(path, row, ["region", "date", "cum_cases", "cum_deaths"])
            header_seen = True
            continue
        if len(row) != 4:
            raise ParseError(path, lineno, f"expected 4 fields, got {len(row)}")
        region, date_s, cases_s, deaths_s = row
        try:
            date = dt.date.fromisoformat(date_s)
        except ValueError:
            raise ParseError(path, lineno, f"bad ISO date {date_s!r}") from None
        try:
            cum_cases, cum_deaths = int(cases_s), int(deaths_s)
        except ValueError:
            raise ParseError(path, lineno, "cumulative counts must be integers") from None
        if cum_cases < 0 or cum_deaths < 0:
            raise ParseError(path, lineno, "cumulative counts must be nonnegative")
        rows.append((region, date, cum_cases, cum_deaths))
    if not header_seen:
        raise ParseError(path, 1, "empty file")
    try:
        return RawCumulativeSeries.from_rows(rows)
    except DataError as exc:
        raise ParseError(path, 0, str(exc)) from None


def parse_flows(path, regions: set | None = None, on_unknown: str = "drop") -> FlowParse:
    """Parse an origin/dest/commuters file into a FlowNetwork."""
    edges = []
    dropped = 0
    header_seen = False
    for lineno, row in _read_rows(path):
        if not header_seen:
            _expect_header(path, row, ["origin", "dest", "commuters"])
            header_seen = True
            continue
        if len(row) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, got {len(row)}")
        origin, dest, commuters_s = row
        try:
            commuters = int(commuters_s)
        except ValueError:
            raise ParseError(path, lineno, f"commuter count must be an integer, got {commuters_s!r}") from None
        if commuters < 0:
            raise ParseError(path, lineno, "commuter count must be nonnegative")
        if regions is not None and (origin not in regions or dest not in regions):
            if on_unknown == "fail":
                raise ParseError(path, lineno, f"unknown region in flow {origin}->{dest}")
            dropped += 1
            continue
        edges.append((origin, dest, commuters))
    if not header_seen:
        raise ParseError(path, 1, "empty file")
    if dropped:
        warnings.warn(f"dropped {dropped} flow rows referencing unknown regions", DroppedRegionWarning)
    try:
        return FlowParse(FlowNetwork(edges), dropped)
    except DataError as exc:
        raise ParseError(path, 0, str(exc)) from None


def parse_contiguity(path, regions: set | None = None, on_unknown: str = "drop") -> ContiguityParse:
    """Parse an undirected region-pair file into a symmetrized ContiguityGraph.

    Pairs present in only one direction are symmetrized; they are reported so
    callers can audit input quality.
    """
    directed = set()
    dropped = 0
    header_seen = False
    for lineno, row in _read_rows(path):
        if not header_seen:
            _expect_header(path, row, ["region_a", "region_b"])
            header_seen = True
            continue
        if len(row) != 2:
            raise ParseError(path, lineno, f"expected 2 fields, got {len(row)}")
        a, b = row
        if a == b:
            raise ParseError(path, lineno, f"self-adjacency for region {a}")
        if regions is not None and (a not in regions or b not in regions):
            if on_unknown == "fail":
                raise ParseError(path, lineno, f"unknown region in pair {a},{b}")
            dropped += 1
            continue
        directed.add((a, b))
    if not header_seen:
        raise ParseError(path, 1, "empty file")
    if dropped:
        warnings.warn(f"dropped {dropped} contiguity rows referencing unknown regions", DroppedRegionWarning)
    asymmetric = tuple(sorted((a, b) for a, b in directed if (b, a) not in directed))
    pairs = {(a, b) if a < b else (b, a) for a, b in directed}
    return ContiguityParse(ContiguityGraph.from_pairs(sorted(pairs)), asymmetric, dropped)


def parse_covariates(path) -> CovariateTable:
    """Parse the region/group/population/covariates file."""
    header = None
    regions, groups, pops = [], [], []
    columns: dict[str, list[float]] = {}
    for lineno, row in _read_rows(path):
        if header is None:
            _expect_header(path, row, ["region", "group", "population"], prefix_only=True)
            header = row
            for name in header[3:]:
                if not name or name in columns:
                    raise ParseError(path, 1, f"bad covariate column name {name!r}")
                columns[name] = []
            continue
        if len(row) != len(header):
            raise ParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        region, group, pop_s = row[0], row[1], row[2]
        try:
            pop = int(pop_s)
        except ValueError:
            raise ParseError(path, lineno, f"population must be an integer, got {pop_s!r}") from None
        if pop <= 0:
            raise ParseError(path, lineno, "population must be positive")
        if region in set(regions):
            raise ParseError(path, lineno, f"duplicate region {region}")
        regions.append(region)
        groups.append(group)
        pops.append(pop)
        for name, value_s in zip(header[3:], row[3:]):
            try:
                columns[name].append(float(value_s))
            except ValueError:
                raise ParseError(path, lineno, f"covariate {name!r} must be numeric, got {value_s!r}") from None
    if header is None:
        raise ParseError(path, 1, "empty file")
    return CovariateTable(
        regions=tuple(regions),
        group=tuple(groups),
        population=np.array(pops, dtype=np.int64),
        columns={name: np.array(vals, dtype=np.float64) for name, vals in columns.items()},
    )


# ---------------------------------------------------------------------------
# CSV writing (the exact schemas the parsers read; round-trip is a test)


def _open_w(path):
    return open(path, "w", encoding="utf-8", newline="")


def write_cases(panel: Panel, path, provenance: Mapping | None = None):
    """Write the panel back out as a cumulative series at period boundaries.

    Cumulative totals are rebuilt from the signed matrices so that re-ingesting
    reproduces both the clamped outcome matrices and the signed ones.
    """
    boundaries = [panel.periods[0].start - dt.timedelta(days=1)] + [p.end for p in panel.periods]
    cum_cases = np.concatenate([np.zeros((panel.n_regions, 1), dtype=np.int64),
                                np.cumsum(panel.cases_signed, axis=1)], axis=1)
    cum_deaths = np.concatenate([np.zeros((panel.n_regions, 1), dtype=np.int64),
                                 np.cumsum(panel.deaths_signed, axis=1)], axis=1)
    if (cum_cases < 0).any() or (cum_deaths < 0).any():
        raise DataError("signed counts imply a negative cumulative total; cannot serialize")
    with _open_w(path) as fh:
        _write_provenance(fh, provenance)
        fh.write("region,date,cum_cases,cum_deaths\n")
        for i, region in enumerate(panel.regions):
            for b, date in enumerate(boundaries):
                fh.write(f"{region},{date.isoformat()},{cum_cases[i, b]},{cum_deaths[i, b]}\n")


def write_flows(network: FlowNetwork, path, provenance: Mapping | None = None):
    with _open_w(path) as fh:
        _write_provenance(fh, provenance)
        fh.write("origin,dest,commuters\n")
        for origin, dest, commuters in network.edges:
            fh.write(f"{origin},{dest},{commuters}\n")


def write_contiguity(graph: ContiguityGraph, path, provenance: Mapping | None = None):
    with _open_w(path) as fh:
        _write_provenance(fh, provenance)
        fh.write("region_a,region_b\n")
        for a, b in graph.pairs():
            fh.write(f"{a},{b}\n")


def write_covariates(panel: Panel, path, provenance: Mapping | None = None):
    names = list(panel.covariates)
    with _open_w(path) as fh:
        _write_provenance(fh, provenance)
        fh.write("region,group,population" + "".join("," + n for n in names) + "\n")
        for i, region in enumerate(panel.regions):
            vals = "".join("," + repr(float(panel.covariates[n][i])) for n in names)
            fh.write(f"{region},{panel.group[i]},{panel.population[i]}{vals}\n")


def _write_provenance(fh, provenance: Mapping | None):
    if provenance:
        fh.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")


# ---------------------------------------------------------------------------
# Derived covariates


@dataclass(frozen=True)
class DisadvantageIndex:
    scores: np.ndarray
    eigenvalue: float
    loadings: dict  # indicator name -> loading on the first component


def disadvantage_index(indicators: Mapping[str, np.ndarray]) -> DisadvantageIndex:
    """First principal component of the indicators' correlation matrix.

    Indicators are standardized to mean 0 / variance 1 (sample variance).
    Sign convention: the loading on the first-listed indicator is nonnegative,
    so higher scores mean more of whatever that indicator measures.
    """
    names = list(indicators)
    if len(names) < 2:
        raise DataError("disadvantage_index needs at least 2 indicator columns")
    cols = []
    for name in names:
        col = np.asarray(indicators[name], dtype=np.float64)
        if np.isnan(col).any():
            raise DataError(f"indicator {name!r} contains missing values")
        sd = col.std(ddof=1)
        if not np.isfinite(sd) or sd <= 0:
            raise DataError(f"indicator {name!r} has zero variance")
        cols.append((col - col.mean()) / sd)
    Z = np.column_stack(cols)
    corr = Z.T @ Z / (len(Z) - 1)
    eigvals, eigvecs = np.linalg.eigh(corr)
    lead = int(np.argmax(eigvals))
    eigenvalue = float(eigvals[lead])
    vec = eigvecs[:, lead]
    if vec[0] < 0:
        vec = -vec
    scores = Z @ vec
    return DisadvantageIndex(
        scores=scores,
        eigenvalue=eigenvalue,
        loadings={name: float(v) for name, v in zip(names, vec)},
    )


def above_average_indicator(column: np.ndarray) -> np.ndarray:
    """1 where the value strictly exceeds the column mean, else 0."""
    col = np.asarray(column, dtype=np.float64)
    if np.isnan(col).any():
        raise DataError("above_average_indicator: column contains missing values")
    return (col > col.mean()).astype(np.int64)


def threshold_indicator(column: np.ndarray, cutoff: float) -> np.ndarray:
    """1 where the value is at least the cutoff, else 0."""
    col = np.asarray(column, dtype=np.float64)
    if np.isnan(col).any():
        raise DataError("threshold_indicator: column contains missing values")
    return (col >= cutoff).astype(np.int64)


# ---------------------------------------------------------------------------
# Descriptive statistics


def describe_panel(panel: Panel, exposures=None) -> list[dict]:
    """Mean/SD/min/max rows for outcomes, covariates, and optional lag columns.

    Outcome statistics pool all region-period cells; covariates are per
    region. SD is the sample standard deviation.
    """

    def stats(name, values):
        values = np.asarray(values, dtype=np.float64)
        return {
            "variable": name,
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            "min": float(values.min()),
            "max": float(values.max()),
        }

    rows = [
        stats("deaths", panel.deaths.ravel()),
        stats("cases", panel.cases.ravel()),
        stats("population", panel.population),
    ]
    for name in panel.covariates:
        rows.append(stats(name, panel.covariates[name]))
    if exposures is not None:
        for name in exposures.column_names:
            mask = exposures.available(name).ravel()
            rows.append(stats(name, exposures.values(name).ravel()[mask]))
    return rows
