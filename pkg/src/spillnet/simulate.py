"""Synthetic data generation with known parameters.

Counts evolve period by period from a negative binomial whose log mean adds
the configured effects of exposure columns computed from the PREVIOUS
period's realized rates via the exposure module, so spillovers are genuinely
causal in-simulation and the fitted model is correctly specified. The delta
measures are not generative (they would reference current-period neighbor
outcomes); their true coefficients are implicitly zero.

Generation is single-threaded per seed and bit-identical across runs.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DataError
from .exposure import (
    FILTER_ALL,
    NETWORK_LAG,
    OWN_RATE_LAG,
    SPATIAL_LAG,
    apply_flow_weights,
    apply_neighbor_mean,
    flow_weight_table,
    neighbor_table,
)
from .panel import ContiguityGraph, FlowNetwork, Panel, RATE_SCALE, make_periods

_GENERATIVE_EXPOSURES = (NETWORK_LAG, SPATIAL_LAG, OWN_RATE_LAG)
_ETA_LIMIT = 42.0  # keeps sampled means far from int64 overflow


@dataclass(frozen=True)
class SimConfig:
    """Ground-truth configuration for synthetic panels."""

    n_groups: int = 10
    regions_per_group: int = 10
    n_periods: int = 6
    network_density: float = 0.15
    flow_log_mean: float = 4.0
    flow_log_sigma: float = 1.0
    contiguity_mean_degree: float = 4.0
    true_beta: Mapping[str, float] = field(default_factory=dict)
    true_alpha: float = 0.5
    sigma2_group: float = 0.2
    sigma2_region: float = 0.3
    baseline_rate: float = 200.0          # cases per 100k per period
    baseline_death_rate: float = 4.0      # deaths per 100k per period
    pop_log_mean: float = math.log(50_000.0)
    pop_log_sigma: float = 0.5
    covariate_names: tuple[str, ...] = ("x1", "x2")
    start_date: dt.date = dt.date(2020, 4, 1)
    period_length_days: int = 14
    seed: int = 0

    def __post_init__(self):
        if min(self.n_groups, self.regions_per_group, self.n_periods) < 1:
            raise DataError("n_groups, regions_per_group, and n_periods must be positive")
        if not 0.0 < self.network_density <= 1.0:
            raise DataError("network_density must be in (0, 1]")
        if self.true_alpha < 0 or self.sigma2_group < 0 or self.sigma2_region < 0:
            raise DataError("alpha and variance components must be nonnegative")
        if self.baseline_rate <= 0 or self.baseline_death_rate <= 0:
            raise DataError("baseline rates must be positive")
        allowed = set(_GENERATIVE_EXPOSURES) | set(self.covariate_names)
        bad = [k for k in self.true_beta if k not in allowed]
        if bad:
            raise DataError(
                f"true_beta keys {bad} are not generative; allowed: "
                f"{sorted(allowed)} (delta measures would be simultaneous)"
            )
        object.__setattr__(self, "true_beta", dict(self.true_beta))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))


@dataclass(frozen=True)
class TruthRecord:
    """Everything needed to check an estimator against the generator."""

    config: SimConfig
    beta: dict           # includes 'const'; cases process
    alpha: float
    sigma2_group: float
    sigma2_region: float
    group_effects: dict
    region_effects: dict

    def to_json_dict(self) -> dict:
        cfg = dataclasses.asdict(self.config)
        cfg["start_date"] = self.config.start_date.isoformat()
        cfg["true_beta"] = dict(self.config.true_beta)
        cfg["covariate_names"] = list(self.config.covariate_names)
        return {
            "config": cfg,
            "beta": dict(self.beta),
            "alpha": self.alpha,
            "sigma2_group": self.sigma2_group,
            "sigma2_region": self.sigma2_region,
            "group_effects": dict(self.group_effects),
            "region_effects": dict(self.region_effects),
        }


@dataclass(frozen=True)
class SimResult:
    panel: Panel
    network: FlowNetwork
    contiguity: ContiguityGraph
    truth: TruthRecord


def _nb_draw(rng: np.random.Generator, mu: np.ndarray, alpha: float) -> np.ndarray:
    if alpha <= 0:
        return rng.poisson(mu)
    shape = 1.0 / alpha
    lam = rng.gamma(shape, alpha * mu)
    return rng.poisson(lam)


def _check_eta(eta: np.ndarray, period: int):
    if float(eta.max()) > _ETA_LIMIT:
        raise DataError(
            f"configured effects imply an overflowing mean at period {period} "
            f"(max log-mean {eta.max():.1f} > {_ETA_LIMIT}); reduce the effects or baseline rate"
        )


def generate(config: SimConfig) -> SimResult:
    """Draw a synthetic panel, flow network, contiguity graph, and truth record."""
    rng = np.random.default_rng(config.seed)
    G, per, T = config.n_groups, config.regions_per_group, config.n_periods
    R = G * per
    regions = tuple(f"R{i:04d}" for i in range(R))
    groups = tuple(f"G{i // per:03d}" for i in range(R))

    population = np.maximum(
        np.round(rng.lognormal(config.pop_log_mean, config.pop_log_sigma, size=R)), 100
    ).astype(np.int64)
    covariates = {name: rng.standard_normal(R) for name in config.covariate_names}

    # contiguity: symmetric random graph with the configured mean degree
    p_edge = min(config.contiguity_mean_degree / max(R - 1, 1), 1.0)
    pairs = []
    for i in range(R):
        for j in range(i + 1, R):
            if rng.random() < p_edge:
                pairs.append((regions[i], regions[j]))
    contiguity = ContiguityGraph.from_pairs(pairs)

    # directed flows with log-normal weights; every region keeps an out-edge
    edges = []
    for i in range(R):
        mask = rng.random(R) < config.network_density
        mask[i] = False
        dests = np.nonzero(mask)[0]
        if len(dests) == 0:
            choice = int(rng.integers(0, R - 1))
            dests = np.array([choice if choice < i else choice + 1])
        for j in dests:
            commuters = int(max(1, round(rng.lognormal(config.flow_log_mean, config.flow_log_sigma))))
            edges.append((regions[i], regions[j], commuters))
    network = FlowNetwork(edges)

    u_group = rng.normal(0.0, math.sqrt(config.sigma2_group), size=G) if config.sigma2_group > 0 else np.zeros(G)
    v_region = rng.normal(0.0, math.sqrt(config.sigma2_region), size=R) if config.sigma2_region > 0 else np.zeros(R)
    group_idx = np.arange(R) // per

    beta = {"const": math.log(config.baseline_rate / RATE_SCALE)}
    beta.update({k: float(v) for k, v in config.true_beta.items()})

    eta_base = (
        np.log(population.astype(np.float64))
        + beta["const"]
        + u_group[group_idx]
        + v_region
    )
    for name in config.covariate_names:
        eta_base = eta_base + beta.get(name, 0.0) * covariates[name]

    flows_tbl = flow_weight_table(regions, network, FILTER_ALL, contiguity, include_self=False)
    neigh_tbl = neighbor_table(regions, contiguity)

    cases = np.zeros((R, T), dtype=np.int64)
    for t in range(T):
        eta = eta_base.copy()
        if t > 0:
            prev_rate = cases[:, t - 1].astype(np.float64) / population * RATE_SCALE
            if beta.get(NETWORK_LAG, 0.0):
                col, ok = apply_flow_weights(flows_tbl, prev_rate)
                eta = eta + beta[NETWORK_LAG] * np.where(ok, col, 0.0)
            if beta.get(SPATIAL_LAG, 0.0):
                eta = eta + beta[SPATIAL_LAG] * apply_neighbor_mean(neigh_tbl, prev_rate)
            if beta.get(OWN_RATE_LAG, 0.0):
                eta = eta + beta[OWN_RATE_LAG] * prev_rate
        _check_eta(eta, t + 1)
        cases[:, t] = _nb_draw(rng, np.exp(eta), config.true_alpha)

    # deaths: baseline process with the same random intercepts, no spillover
    eta_d = (
        np.log(population.astype(np.float64))
        + math.log(config.baseline_death_rate / RATE_SCALE)
        + u_group[group_idx]
        + v_region
    )
    _check_eta(eta_d, 0)
    deaths = np.column_stack([_nb_draw(rng, np.exp(eta_d), config.true_alpha) for _ in range(T)])

    panel = Panel(
        regions=regions,
        periods=make_periods(config.start_date, config.period_length_days, T),
        deaths=deaths,
        cases=cases,
        population=population,
        covariates=covariates,
        group=groups,
    )
    truth = TruthRecord(
        config=config,
        beta=beta,
        alpha=config.true_alpha,
        sigma2_group=config.sigma2_group,
        sigma2_region=config.sigma2_region,
        group_effects={f"G{g:03d}": float(u_group[g]) for g in range(G)},
        region_effects={regions[i]: float(v_region[i]) for i in range(R)},
    )
    return SimResult(panel=panel, network=network, contiguity=contiguity, truth=truth)
