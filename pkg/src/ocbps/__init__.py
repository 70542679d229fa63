"""Optimal covariate balancing propensity score weighting.

Estimate average treatment effects by inverse-probability weighting with
propensity coefficients chosen to balance covariate moments between
arms; includes the two-block balancing scheme that makes the weighting
estimator doubly robust and locally efficient, maximum-likelihood and
one-block comparators, an odds-weighted ATT estimator, plug-in
asymptotic variances, and a seeded simulation harness.
"""

from .design import (
    BalanceSpec,
    CovariateFunction,
    ObservedSample,
    design_matrix,
    evaluate_functions,
    parse_function_spec,
    render_function_spec,
)
from .errors import (
    DataError,
    DimensionError,
    EvaluationError,
    NonconvergenceError,
    SingularDesignError,
    SpecParseError,
)
from .estimators import (
    OutcomeFits,
    aipw,
    att_from_propensity,
    fit_att,
    fit_cbps_ate,
    fit_ocbps_ate,
    fit_ocbps_sieve,
    fit_outcomes,
    fitted_propensity,
    iptw,
)
from .gmm import (
    FitResult,
    GmmOptions,
    MomentSystem,
    att_system,
    cbps_system,
    estimate_omega,
    ocbps_system,
    ridged_inverse,
    score_system,
    solve,
)
from .inference import (
    EstimateReport,
    VarianceComponents,
    VarianceFloorWarning,
    att_variance_from_pi,
    build_report,
    confidence_interval,
    ocbps_variance_forms,
    var_att,
    var_cbps,
    var_glm,
    var_ocbps,
    var_true,
    var_vopt_plugin,
    variance_components,
)
from .propensity import (
    LogisticModel,
    SieveModel,
    clip_propensity,
    fit_mle,
    pi,
    pi_grad,
    union_basis,
)
from .simulation import (
    DgpSpec,
    McRow,
    McSummary,
    OracleEstimate,
    bias_oracle_B,
    design_expectation,
    dgp_from_config,
    draw_replication,
    make_optimal_f,
    outcome_means,
    run_monte_carlo,
    true_ate,
    true_propensity,
    write_summary_csv,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceSpec",
    "CovariateFunction",
    "DataError",
    "DgpSpec",
    "DimensionError",
    "EstimateReport",
    "EvaluationError",
    "FitResult",
    "GmmOptions",
    "LogisticModel",
    "McRow",
    "McSummary",
    "MomentSystem",
    "NonconvergenceError",
    "ObservedSample",
    "OracleEstimate",
    "OutcomeFits",
    "SieveModel",
    "SingularDesignError",
    "SpecParseError",
    "VarianceComponents",
    "VarianceFloorWarning",
    "aipw",
    "att_from_propensity",
    "att_system",
    "att_variance_from_pi",
    "bias_oracle_B",
    "build_report",
    "cbps_system",
    "clip_propensity",
    "confidence_interval",
    "design_expectation",
    "design_matrix",
    "dgp_from_config",
    "draw_replication",
    "estimate_omega",
    "evaluate_functions",
    "fit_att",
    "fit_cbps_ate",
    "fit_mle",
    "fit_ocbps_ate",
    "fit_ocbps_sieve",
    "fit_outcomes",
    "fitted_propensity",
    "iptw",
    "make_optimal_f",
    "ocbps_system",
    "ocbps_variance_forms",
    "outcome_means",
    "parse_function_spec",
    "pi",
    "pi_grad",
    "render_function_spec",
    "ridged_inverse",
    "run_monte_carlo",
    "score_system",
    "solve",
    "true_ate",
    "true_propensity",
    "union_basis",
    "var_att",
    "var_cbps",
    "var_glm",
    "var_ocbps",
    "var_true",
    "var_vopt_plugin",
    "variance_components",
    "write_summary_csv",
]
