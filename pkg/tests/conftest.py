import datetime as dt

import numpy as np
import pytest

from spillnet.panel import ContiguityGraph, FlowNetwork, Panel, make_periods


@pytest.fixture
def toy_panel():
    """2 regions x 3 periods with one covariate; hand-checkable numbers."""
    return Panel(
        regions=("A", "B"),
        periods=make_periods(dt.date(2020, 4, 1), 14, 3),
        deaths=np.array([[1, 2, 3], [0, 1, 0]]),
        cases=np.array([[10, 20, 30], [5, 0, 15]]),
        population=np.array([10_000, 20_000]),
        covariates={"poverty": np.array([0.2, 0.4])},
        group=("S1", "S1"),
    )


@pytest.fixture
def toy_network():
    return FlowNetwork([("A", "B", 60), ("A", "C", 40), ("B", "A", 10), ("C", "A", 5)])


@pytest.fixture
def toy_graph():
    return ContiguityGraph.from_pairs([("A", "B")])


def random_rates(rng, regions):
    return {r: float(v) for r, v in zip(regions, rng.uniform(0, 500, len(regions)))}


def random_network_and_graph(rng, n_regions, density=0.3, contiguity_p=0.25):
    """A random directed flow network plus a random symmetric adjacency."""
    regions = [f"Z{i:03d}" for i in range(n_regions)]
    edges = []
    for i, origin in enumerate(regions):
        for j, dest in enumerate(regions):
            if i != j and rng.random() < density:
                edges.append((origin, dest, int(rng.integers(1, 500))))
    if not edges:
        edges.append((regions[0], regions[-1], 7))
    pairs = []
    for i in range(n_regions):
        for j in range(i + 1, n_regions):
            if rng.random() < contiguity_p:
                pairs.append((regions[i], regions[j]))
    net = FlowNetwork(edges)
    graph = ContiguityGraph.from_pairs(pairs) if pairs else ContiguityGraph({})
    return regions, edges, pairs, net, graph
