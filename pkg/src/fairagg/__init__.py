"""Aggregate bank-specific loss models into one industry model.

Population estimators (pooled, FEO, SEO, PTF, WATE, conditional
expectation) work on :class:`BankPopulation` objects in closed form; the
sample estimators, tests and additive models work on :class:`PanelDataset`.
"""

__version__ = "0.1.0"

from .errors import (
    BankIdentityError,
    ConvergenceError,
    DataError,
    DimensionError,
    FairAggError,
    HypothesisViolation,
    NotPositiveDefiniteError,
    RankDeficientError,
    SingularMatrixError,
)
from .model import (
    BankModel,
    BankPopulation,
    ForecasterKind,
    LinearForecaster,
    PopulationMoments,
    forecast,
    mixture_sample_mean_loss,
    population_moments,
    population_mse,
)
from .population import (
    ConditionalExpectationForecaster,
    FeoDecomposition,
    InteractionPopulation,
    PtfForecaster,
    conditional_expectation_forecast,
    feo_decomposition,
    fit_conditional_expectation,
    fit_feo,
    fit_feo_with_interactions,
    fit_pooled,
    fit_ptf,
    fit_seo,
    fit_wate,
)
from .panel import PanelDataset, read_panel_csv, write_panel_csv
from .sample import (
    CovarianceSpec,
    Intercepts,
    LagMode,
    PanelMode,
    RegressionFit,
    SlopeOfFeature,
    WaldResult,
    ar_panel_fit,
    centered_dummies,
    clustered_covariance,
    fit_panel,
    heterogeneity_test,
    pooled_vs_feo_test,
    relative_prediction_differences,
    wald_linear_restrictions,
    weighted_least_squares,
)
from .smoothers import CubicSplinePenalized, Linear, RunningMeanBins
from .additive import AdditiveModel, Term, backfit, fit_gam, nested_f_test, nonlinear_misdirection_check
from .diagnostics import (
    Bias,
    MeanForecast,
    PointForecast,
    convex_weights_check,
    demographic_parity_stats,
    misdirection_check,
    population_bias,
    sensitivity,
)
from .pipeline import build_regression_frame, clean, compute_rates, macro_pc1, stress_weights
from .scenarios import SCENARIOS, SIM_A, SIM_B, SIM_C, SIM_D
from .simulation import SimConfig, monte_carlo_estimate, sample_population, simulate_panel
