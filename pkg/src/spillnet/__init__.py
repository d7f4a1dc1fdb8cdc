"""spillnet: spillover exposures over commuting-flow networks, multilevel
negative binomial count models, permutation importance, and weighting-based
causal effect estimation for region panels."""

from .panel import (
    ContiguityGraph,
    DesignTable,
    FlowNetwork,
    ModelSpec,
    Panel,
    Period,
    build_design,
    make_periods,
)
from .ingest import (
    CovariateTable,
    RawCumulativeSeries,
    above_average_indicator,
    build_panel,
    describe_panel,
    disadvantage_index,
    parse_cases,
    parse_contiguity,
    parse_covariates,
    parse_flows,
    threshold_indicator,
)
from .exposure import (
    LagColumnSet,
    build_lag_columns,
    case_rate,
    contiguous_flow_share,
    network_delta_lag,
    network_lag,
    spatial_delta_lag,
    spatial_lag,
)
from .negbin import (
    FitResult,
    fit_nb_glm,
    fit_nb_mixed,
    laplace_loglik,
    loglik_and_score,
    predict_mu,
    robust_se,
)
from .permute import PermutationReport, maape, permutation_test
from .causal import (
    CausalEstimate,
    WeightSet,
    cbps_weights,
    iptw_weights,
    super_learner_weights,
    weighted_effect,
    weighted_mean_difference,
)
from .simulate import SimConfig, SimResult, TruthRecord, generate

__version__ = "0.1.0"

__all__ = [
    "ContiguityGraph", "DesignTable", "FlowNetwork", "ModelSpec", "Panel", "Period",
    "build_design", "make_periods",
    "CovariateTable", "RawCumulativeSeries", "above_average_indicator", "build_panel",
    "describe_panel", "disadvantage_index", "parse_cases", "parse_contiguity",
    "parse_covariates", "parse_flows", "threshold_indicator",
    "LagColumnSet", "build_lag_columns", "case_rate", "contiguous_flow_share",
    "network_delta_lag", "network_lag", "spatial_delta_lag", "spatial_lag",
    "FitResult", "fit_nb_glm", "fit_nb_mixed", "laplace_loglik", "loglik_and_score",
    "predict_mu", "robust_se",
    "PermutationReport", "maape", "permutation_test",
    "CausalEstimate", "WeightSet", "cbps_weights", "iptw_weights",
    "super_learner_weights", "weighted_effect", "weighted_mean_difference",
    "SimConfig", "SimResult", "TruthRecord", "generate",
]
