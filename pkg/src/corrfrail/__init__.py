"""Competing-risks proportional hazards with additive correlated gamma frailty.

Cause-specific Cox fitting, EM estimation of correlated frailties, shared
gamma and log-normal frailty, Monte-Carlo p-value combination, biomarker
cutpoint search and a simulation engine for recovery studies.
"""

__version__ = "0.1.0"

from .coxph import CoxFit, FitOptions, breslow_baseline, fit_cox, partial_loglik, wald_pvalue
from .dataset import (
    CompetingRisksDataset,
    CsvSchema,
    StepFunction,
    cluster_summaries,
    cumulative_incidence,
    cutoff_grid,
    dichotomize,
    dummy_code,
    kaplan_meier,
    load_csv,
    save_csv,
)
from .errors import (
    BudgetExceededError,
    ConvergenceError,
    CorrFrailError,
    ExpansionTooLargeError,
    FewClustersWarning,
    MonotoneLikelihoodError,
    MonotoneLikelihoodWarning,
    NoAdmissibleCutoffError,
    RowValidationError,
    SchemaError,
    SingularInformationError,
    UndefinedCorrelationError,
)
from .frailty import (
    CorrelatedFrailtyFit,
    FrailtyOptions,
    FrailtyParams,
    estep_posterior,
    fit_correlated_frailty,
    frailty_moments,
    observed_loglik,
    posterior_quadrature,
)
from .inference import empirical_summary, standard_errors
from .pcombine import CombinerKind, MonteCarloConfig, combine_statistic, monte_carlo_pvalue
from .report import emit_report
from .shared_frailty import fit_independent_frailty, fit_shared_frailty
from .simulate import SimConfig, draw_frailties, replicate_study, simulate_dataset
from .threshold import (
    ModelConfig,
    all_orderings,
    pvalue_variance_correlation,
    scan_single_gene,
    stepwise_multi_gene,
    validate_partitions,
)
