"""Federated causal estimation for relative measures across sites.

Implements semiparametrically efficient multi-site estimators of causal
measures (risk ratio, risk difference) for a designated target site,
site-weighted federation with penalized weight selection, and a bootstrap
threshold-selection pipeline, together with a reproducible Monte Carlo
harness.
"""

from .core import (
    CausalMeasure,
    DomainViolation,
    EstimateReport,
    FedcausalError,
    InfluenceSample,
    IoFailure,
    MultiSiteData,
    RISK_DIFFERENCE,
    RISK_RATIO,
    SchemaError,
    SiteDataset,
    ValidationError,
    measure_apply,
    measure_eif_combine,
    measure_g_inverse,
    parse_measure,
    validate_multisite,
)
from .estimators import estimate_measure
from .federation import (
    Cohort,
    FederatedWeights,
    FileTransport,
    MemoryTransport,
    Message,
    ProtocolViolation,
    WeightSolution,
    audit_transcript,
    estimate_fw,
    federated_weights,
    solve_weights,
)
from .nuisance import (
    DEFAULT_CONFIG,
    MisspecSpec,
    NuisanceBundle,
    NuisanceConfig,
    fit_bundle,
)
from .pfws import (
    BootstrapPlan,
    MseCurve,
    ThresholdGrid,
    estimate_fs,
    mse_curve,
    select_threshold,
)
from .sim import (
    MISSPEC_TYPES,
    MetricsTable,
    SCENARIOS,
    ScenarioSpec,
    UnsupportedDgpForm,
    emit_table,
    generate,
    load_scenario,
    run_monte_carlo,
    true_psi,
)

__version__ = "0.1.0"

__all__ = [
    "BootstrapPlan",
    "CausalMeasure",
    "Cohort",
    "DEFAULT_CONFIG",
    "DomainViolation",
    "EstimateReport",
    "FedcausalError",
    "FederatedWeights",
    "FileTransport",
    "InfluenceSample",
    "IoFailure",
    "MISSPEC_TYPES",
    "MemoryTransport",
    "Message",
    "MetricsTable",
    "MisspecSpec",
    "MseCurve",
    "MultiSiteData",
    "NuisanceBundle",
    "NuisanceConfig",
    "ProtocolViolation",
    "RISK_DIFFERENCE",
    "RISK_RATIO",
    "SCENARIOS",
    "ScenarioSpec",
    "SchemaError",
    "SiteDataset",
    "ThresholdGrid",
    "UnsupportedDgpForm",
    "ValidationError",
    "WeightSolution",
    "audit_transcript",
    "emit_table",
    "estimate_fs",
    "estimate_fw",
    "estimate_measure",
    "federated_weights",
    "fit_bundle",
    "generate",
    "load_scenario",
    "measure_apply",
    "measure_eif_combine",
    "measure_g_inverse",
    "mse_curve",
    "parse_measure",
    "run_monte_carlo",
    "select_threshold",
    "solve_weights",
    "true_psi",
    "validate_multisite",
]
