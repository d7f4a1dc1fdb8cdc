"""Flow-network and spatial lag measures over region panels.

Five lag columns are produced, all rates per 100k population:

  network_lag     flow-share-weighted average of connected regions' rates at t-1
  network_delta   same weighting applied to each region's rate change (t minus t-1)
  spatial_lag     unweighted mean of contiguous neighbors' rates at t-1
  spatial_delta   unweighted mean of neighbors' rate changes
  own_rate_lag    the region's own (signed) rate at t-1

Flow-share weights always sum to 1 over the retained destinations: when a
contiguity filter is active, or self-flows are excluded (the default), the
outgoing total is recomputed over what remains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DataError
from .panel import ContiguityGraph, FlowNetwork, Panel, MODE_CROSS_SECTIONAL, MODE_PANEL, RATE_SCALE

FILTER_ALL = "all"
FILTER_CONTIGUOUS = "contiguous_only"
FILTER_NONCONTIGUOUS = "noncontiguous_only"
FILTERS = (FILTER_ALL, FILTER_CONTIGUOUS, FILTER_NONCONTIGUOUS)

NETWORK_LAG = "network_lag"
NETWORK_DELTA = "network_delta"
SPATIAL_LAG = "spatial_lag"
SPATIAL_DELTA = "spatial_delta"
OWN_RATE_LAG = "own_rate_lag"
LAG_COLUMNS = (NETWORK_LAG, NETWORK_DELTA, SPATIAL_LAG, SPATIAL_DELTA, OWN_RATE_LAG)


def case_rate(cases: float, population: float) -> float:
    """New counts per 100k population; signed inputs allowed."""
    if population <= 0:
        raise DataError(f"population must be positive, got {population}")
    return cases / population * RATE_SCALE


def _retained_flows(
    net: FlowNetwork,
    home: str,
    filter: str = FILTER_ALL,
    contig: ContiguityGraph | None = None,
    include_self: bool = False,
) -> tuple[tuple[str, ...], np.ndarray] | None:
    """Destinations kept under the filter and their normalized flow shares.

    Returns None when no outgoing flow survives (distinct from a 0.0 lag).
    This is the single source of weighting truth for all network measures.
    """
    if filter not in FILTERS:
        raise DataError(f"filter must be one of {FILTERS}, got {filter!r}")
    if filter != FILTER_ALL and contig is None:
        raise DataError(f"filter {filter!r} requires a contiguity graph")
    kept_dests = []
    kept_counts = []
    neighbors = contig.neighbors(home) if contig is not None else frozenset()
    for dest, commuters in net.destinations(home):
        if dest == home and not include_self:
            continue
        if filter == FILTER_CONTIGUOUS and dest not in neighbors:
            continue
        if filter == FILTER_NONCONTIGUOUS and dest in neighbors:
            continue
        if commuters == 0:
            continue
        kept_dests.append(dest)
        kept_counts.append(commuters)
    total = sum(kept_counts)
    if total == 0:
        return None
    weights = np.array(kept_counts, dtype=np.float64) / float(total)
    return tuple(kept_dests), weights


def network_lag(
    net: FlowNetwork,
    rates: Mapping[str, float],
    home: str,
    filter: str = FILTER_ALL,
    contig: ContiguityGraph | None = None,
    include_self: bool = False,
) -> float | None:
    """Flow-share-weighted average of destination rates; None if no flow retained."""
    retained = _retained_flows(net, home, filter, contig, include_self)
    if retained is None:
        return None
    dests, weights = retained
    try:
        values = np.array([rates[d] for d in dests], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"no rate known for destination {exc.args[0]!r}") from None
    return float(weights @ values)


def network_delta_lag(
    net: FlowNetwork,
    deltas: Mapping[str, float],
    home: str,
    filter: str = FILTER_ALL,
    contig: ContiguityGraph | None = None,
    include_self: bool = False,
) -> float | None:
    """Flow-share-weighted average of destination rate changes (current minus prior)."""
    return network_lag(net, deltas, home, filter, contig, include_self)


def spatial_lag(contig: ContiguityGraph, rates: Mapping[str, float], home: str) -> float:
    """Unweighted mean of neighbor rates; isolated regions get 0.0."""
    neighbors = sorted(contig.neighbors(home))
    if not neighbors:
        return 0.0
    try:
        values = np.array([rates[n] for n in neighbors], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"no rate known for neighbor {exc.args[0]!r}") from None
    return float(values.mean())


def spatial_delta_lag(contig: ContiguityGraph, deltas: Mapping[str, float], home: str) -> float:
    """Unweighted mean of neighbor rate changes (current minus prior)."""
    return spatial_lag(contig, deltas, home)


@dataclass(frozen=True, eq=False)
class LagColumnSet:
    """Computed lag columns for every region-period cell.

    Unavailable cells (no prior period, or no retained flow under the active
    filter) hold 0.0 and are masked out in ``available``. Isolated regions are
    flagged separately: their spatial lag is a usable 0.0.
    """

    region_order: tuple[str, ...]
    period_labels: tuple[str, ...]
    mode: str
    filter: str
    _values: dict
    _available: dict
    isolated_regions: frozenset

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def values(self, name: str) -> np.ndarray:
        if name not in self._values:
            raise DataError(f"no lag column {name!r}; have {sorted(self._values)}")
        return self._values[name]

    def available(self, name: str) -> np.ndarray:
        if name not in self._available:
            raise DataError(f"no lag column {name!r}; have {sorted(self._available)}")
        return self._available[name]


def flow_weight_table(
    regions: tuple[str, ...],
    net: FlowNetwork,
    filter: str = FILTER_ALL,
    contig: ContiguityGraph | None = None,
    include_self: bool = False,
) -> list:
    """Per-region retained destination indices and normalized flow shares.

    Entries are None where no outgoing flow survives the filter.
    """
    index = {r: i for i, r in enumerate(regions)}
    table = []
    for home in regions:
        retained = _retained_flows(net, home, filter, contig, include_self)
        if retained is None:
            table.append(None)
            continue
        dests, weights = retained
        unknown = [d for d in dests if d not in index]
        if unknown:
            raise DataError(f"flow destinations {unknown[:5]} are not panel regions")
        table.append((np.array([index[d] for d in dests], dtype=np.int64), weights))
    return table


def neighbor_table(regions: tuple[str, ...], contig: ContiguityGraph) -> list:
    """Per-region neighbor indices (empty arrays for isolated regions)."""
    index = {r: i for i, r in enumerate(regions)}
    table = []
    for home in regions:
        neighbors = sorted(contig.neighbors(home))
        unknown = [n for n in neighbors if n not in index]
        if unknown:
            raise DataError(f"contiguity neighbors {unknown[:5]} are not panel regions")
        table.append(np.array([index[n] for n in neighbors], dtype=np.int64))
    return table


def apply_flow_weights(table: list, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flow-share-weighted averages of ``values``; mask is False where missing."""
    col = np.zeros(len(table))
    ok = np.zeros(len(table), dtype=bool)
    for i, entry in enumerate(table):
        if entry is None:
            continue
        idx, weights = entry
        col[i] = weights @ values[idx]
        ok[i] = True
    return col, ok


def apply_neighbor_mean(table: list, values: np.ndarray) -> np.ndarray:
    """Unweighted neighbor means of ``values``; isolated regions get 0.0."""
    col = np.zeros(len(table))
    for i, idx in enumerate(table):
        if len(idx):
            col[i] = values[idx].mean()
    return col


def build_lag_columns(
    panel: Panel,
    net: FlowNetwork,
    contig: ContiguityGraph,
    filter: str = FILTER_ALL,
    mode: str = MODE_PANEL,
    include_self: bool = False,
    outcome: str = "cases",
) -> LagColumnSet:
    """Compute all lag columns across the panel.

    Panel mode needs at least 2 periods; first-period cells are flagged
    unavailable. Cross-sectional mode computes single lag columns from
    cumulative totals (no temporal lag, so no delta columns).
    """
    flows = flow_weight_table(panel.regions, net, filter, contig, include_self)
    neigh = neighbor_table(panel.regions, contig)
    isolated = frozenset(r for r, idx in zip(panel.regions, neigh) if len(idx) == 0)
    R = panel.n_regions

    def network_column(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return apply_flow_weights(flows, values)

    def spatial_column(values: np.ndarray) -> np.ndarray:
        return apply_neighbor_mean(neigh, values)

    if mode == MODE_PANEL:
        if panel.n_periods < 2:
            raise DataError("panel mode needs at least 2 periods to form lags")
        rates = panel.rate_matrix(outcome, signed=True)
        T = panel.n_periods
        vals = {name: np.zeros((R, T)) for name in LAG_COLUMNS}
        net_ok = np.zeros((R, T), dtype=bool)
        time_ok = np.zeros((R, T), dtype=bool)
        for t in range(1, T):
            prev = rates[:, t - 1]
            delta = rates[:, t] - prev
            ncol, ok = network_column(prev)
            dcol, _ = network_column(delta)
            vals[NETWORK_LAG][:, t] = ncol
            vals[NETWORK_DELTA][:, t] = dcol
            net_ok[:, t] = ok
            vals[SPATIAL_LAG][:, t] = spatial_column(prev)
            vals[SPATIAL_DELTA][:, t] = spatial_column(delta)
            vals[OWN_RATE_LAG][:, t] = prev
            time_ok[:, t] = True
        avail = {
            NETWORK_LAG: net_ok,
            NETWORK_DELTA: net_ok.copy(),
            SPATIAL_LAG: time_ok,
            SPATIAL_DELTA: time_ok.copy(),
            OWN_RATE_LAG: time_ok.copy(),
        }
        period_labels = panel.period_labels
    elif mode == MODE_CROSS_SECTIONAL:
        cum_rates = panel.cumulative_counts(outcome).astype(np.float64) / panel.population * RATE_SCALE
        ncol, ok = network_column(cum_rates)
        vals = {
            NETWORK_LAG: ncol[:, None],
            SPATIAL_LAG: spatial_column(cum_rates)[:, None],
            OWN_RATE_LAG: cum_rates[:, None].copy(),
        }
        avail = {
            NETWORK_LAG: ok[:, None],
            SPATIAL_LAG: np.ones((R, 1), dtype=bool),
            OWN_RATE_LAG: np.ones((R, 1), dtype=bool),
        }
        period_labels = ("cumulative",)
    else:
        raise DataError(f"mode must be {MODE_PANEL!r} or {MODE_CROSS_SECTIONAL!r}, got {mode!r}")

    for name in vals:
        v = vals[name]
        v.flags.writeable = False
        avail[name].flags.writeable = False
        if not np.isfinite(v).all():
            raise DataError(f"non-finite value in lag column {name!r}")

    return LagColumnSet(
        region_order=panel.regions,
        period_labels=period_labels,
        mode=mode,
        filter=filter,
        _values=vals,
        _available=avail,
        isolated_regions=isolated,
    )


def contiguous_flow_share(
    net: FlowNetwork,
    contig: ContiguityGraph,
    home: str,
    include_self: bool = False,
) -> float | None:
    """Share of retained outgoing flow going to contiguous destinations.

    Links the unfiltered network lag to its contiguous-only and
    noncontiguous-only variants: lag_all = s * lag_contig + (1-s) * lag_noncontig.
    """
    retained = _retained_flows(net, home, FILTER_ALL, contig, include_self)
    if retained is None:
        return None
    dests, weights = retained
    neighbors = contig.neighbors(home)
    return float(sum(w for d, w in zip(dests, weights) if d in neighbors))
