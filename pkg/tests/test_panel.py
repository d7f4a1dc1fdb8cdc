import datetime as dt

import numpy as np
import pytest

from spillnet.errors import ColumnError, DataError
from spillnet.panel import (
    ContiguityGraph,
    FlowNetwork,
    ModelSpec,
    Panel,
    build_design,
    make_periods,
)


class TestFlowNetwork:
    def test_out_total_sums_all_outgoing(self):
        net = FlowNetwork([("A", "B", 60), ("A", "C", 40)])
        assert net.out_total["A"] == 100
        assert net.destinations("A") == (("B", 60), ("C", 40))

    def test_self_flows_are_stored_and_counted_in_out_total(self):
        net = FlowNetwork([("A", "A", 10), ("A", "B", 30)])
        assert net.out_total["A"] == 40

    def test_duplicate_edge_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            FlowNetwork([("A", "B", 1), ("A", "B", 2)])

    def test_negative_count_rejected(self):
        with pytest.raises(DataError, match="nonnegative"):
            FlowNetwork([("A", "B", -1)])

    def test_equality_is_structural(self):
        e = [("A", "B", 60), ("A", "C", 40)]
        assert FlowNetwork(e) == FlowNetwork(list(reversed(e)))


class TestContiguityGraph:
    def test_from_pairs_symmetrizes(self):
        g = ContiguityGraph.from_pairs([("A", "B")])
        assert "B" in g.neighbors("A") and "A" in g.neighbors("B")

    def test_asymmetric_adjacency_rejected(self):
        with pytest.raises(DataError, match="asymmetric"):
            ContiguityGraph({"A": {"B"}, "B": set()})

    def test_self_loop_rejected(self):
        with pytest.raises(DataError, match="self-loop"):
            ContiguityGraph.from_pairs([("A", "A")])

    def test_isoled_region_has_no_neighbors(self):
        g = ContiguityGraph.from_pairs([("A", "B")])
        assert g.is_isolated("C")
        assert g.neighbors("C") == frozenset()


class TestPanel:
    def test_dimension_mismatch_rejected(self, toy_panel):
        with pytest.raises(DataError, match="shape"):
            Panel(
                regions=("A", "B"),
                periods=make_periods(dt.date(2020, 4, 1), 14, 3),
                deaths=np.zeros((2, 2), dtype=int),
                cases=np.zeros((2, 3), dtype=int),
                population=np.array([1, 1]),
                covariates={},
                group=("S", "S"),
            )

    def test_population_must_be_positive(self):
        with pytest.raises(DataError, match="population"):
            Panel(
                regions=("A",),
                periods=make_periods(dt.date(2020, 4, 1), 14, 1),
                deaths=np.zeros((1, 1), dtype=int),
                cases=np.zeros((1, 1), dtype=int),
                population=np.array([0]),
                covariates={},
                group=("S",),
            )

    def test_overlapping_periods_rejected(self):
        periods = (
            make_periods(dt.date(2020, 4, 1), 14, 1)
            + make_periods(dt.date(2020, 4, 10), 14, 1)
        )
        with pytest.raises(DataError, match="overlap"):
            Panel(
                regions=("A",),
                periods=periods,
                deaths=np.zeros((1, 2), dtype=int),
                cases=np.zeros((1, 2), dtype=int),
                population=np.array([10]),
                covariates={},
                group=("S",),
            )

    def test_rate_matrix_per_100k(self, toy_panel):
        rates = toy_panel.rate_matrix("cases")
        assert rates[0, 0] == pytest.approx(10 / 10_000 * 100_000)

    def test_cumulative_counts(self, toy_panel):
        assert list(toy_panel.cumulative_counts("cases")) == [60, 20]

    def test_matrices_are_immutable(self, toy_panel):
        with pytest.raises(ValueError):
            toy_panel.cases[0, 0] = 99


class TestModelSpec:
    def test_bad_outcome_rejected(self):
        with pytest.raises(ColumnError):
            ModelSpec(outcome="hospitalizations", predictors=())

    def test_bad_random_levels_rejected(self):
        with pytest.raises(DataError):
            ModelSpec(outcome="deaths", predictors=(), random_levels=("region", "group"))

    @pytest.mark.parametrize("levels", [(), ("group",), ("region",), ("group", "region")])
    def test_valid_levels(self, levels):
        assert ModelSpec(outcome="deaths", predictors=(), random_levels=levels).random_levels == levels


class TestBuildDesign:
    def test_toy_panel_row_and_dummy_counts(self, toy_panel):
        spec = ModelSpec(
            outcome="deaths",
            predictors=("poverty",) + toy_panel.period_dummy_names(),
            random_levels=("group", "region"),
        )
        design = build_design(toy_panel, None, spec)
        assert design.n == 6
        assert sum(name.startswith("period:") for name in design.x_names) == 2

    def test_missing_predictor_named(self, toy_panel):
        spec = ModelSpec(outcome="deaths", predictors=("foo",))
        with pytest.raises(ColumnError, match="'foo'"):
            build_design(toy_panel, None, spec)

    def test_design_matches_hand_built_table(self, toy_panel):
        # brute-force construction for the 2x3 panel: region-major rows,
        # first period as the dummy reference
        dummies = toy_panel.period_dummy_names()
        spec = ModelSpec(outcome="deaths", predictors=("poverty",) + dummies)
        design = build_design(toy_panel, None, spec)

        expected_rows = []
        for i, region in enumerate(("A", "B")):
            for t in range(3):
                pov = [0.2, 0.4][i]
                d2 = 1.0 if t == 1 else 0.0
                d3 = 1.0 if t == 2 else 0.0
                y = [[1, 2, 3], [0, 1, 0]][i][t]
                expected_rows.append(([1.0, pov, d2, d3], float(y)))
        assert design.x_names == ("const", "poverty") + dummies
        for row, (xrow, y) in zip(range(design.n), expected_rows):
            assert design.X[row].tolist() == xrow
            assert design.y[row] == y

    def test_offset_is_log_population(self, toy_panel):
        spec = ModelSpec(outcome="deaths", predictors=("poverty",))
        design = build_design(toy_panel, None, spec)
        assert design.offset[0] == pytest.approx(np.log(10_000))
        assert design.offset[3] == pytest.approx(np.log(20_000))

    def test_pure_function_byte_identical(self, toy_panel):
        spec = ModelSpec(outcome="cases", predictors=("poverty",))
        a = build_design(toy_panel, None, spec).to_csv_bytes()
        b = build_design(toy_panel, None, spec).to_csv_bytes()
        assert a == b

    def test_nan_cell_reported_with_offender(self, toy_panel):
        bad = Panel(
            regions=toy_panel.regions,
            periods=toy_panel.periods,
            deaths=toy_panel.deaths,
            cases=toy_panel.cases,
            population=toy_panel.population,
            covariates={"poverty": np.array([0.2, np.nan])},
            group=toy_panel.group,
        )
        spec = ModelSpec(outcome="deaths", predictors=("poverty",))
        with pytest.raises(DataError, match="poverty"):
            build_design(bad, spec=spec, exposures=None)

    def test_cross_sectional_mode_one_row_per_region(self, toy_panel):
        spec = ModelSpec(outcome="cases", predictors=("poverty",), mode="cross-sectional", random_levels=())
        design = build_design(toy_panel, None, spec)
        assert design.n == 2
        assert list(design.y) == [60.0, 20.0]

    def test_exposure_unavailability_drops_rows(self, toy_panel, toy_network, toy_graph):
        from spillnet.exposure import build_lag_columns

        net = FlowNetwork([("A", "B", 60), ("B", "A", 10)])
        lags = build_lag_columns(toy_panel, net, toy_graph)
        spec = ModelSpec(outcome="deaths", predictors=("network_lag",))
        design = build_design(toy_panel, lags, spec)
        # first period unavailable for both regions
        assert design.n == 4
        assert design.n_dropped_unavailable == 2


class TestDesignTable:
    def test_with_column_replaces_values(self, toy_panel):
        spec = ModelSpec(outcome="deaths", predictors=("poverty",))
        design = build_design(toy_panel, None, spec)
        new = design.with_column("poverty", np.zeros(design.n))
        assert new.column("poverty").sum() == 0.0
        assert design.column("poverty").sum() != 0.0

    def test_unknown_column_error(self, toy_panel):
        spec = ModelSpec(outcome="deaths", predictors=("poverty",))
        design = build_design(toy_panel, None, spec)
        with pytest.raises(ColumnError):
            design.column("nope")
