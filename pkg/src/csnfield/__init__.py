"""Closed skew-normal random fields.

Density evaluation, simulation via block Metropolis-Hastings on the
latent truncated Gaussian, Monte Carlo maximum likelihood, and Bayesian
prediction under a linear-Gaussian observation model.
"""

from .errors import (
    ConditioningDegenerateError,
    DataFormatError,
    DesignMismatchError,
    NotPositiveSemidefiniteError,
    NumericalDegeneracyError,
    OptimizationFailureError,
)
from .gaussian import (
    CholFactor,
    GaussianSplit,
    GridSpec,
    KroneckerCov,
    SequentialConditioner,
    cholesky,
    conditional_gaussian,
    exp_correlation_matrix,
    kronecker_cov,
    norm_logcdf,
    norm_pdf_cdf,
    sequential_conditionals,
)
from .orthant import (
    CrnStream,
    OrthantEstimate,
    OrthantProblem,
    default_shift,
    estimate_orthant,
    log_orthant_ratio,
    make_crn,
)
from .truncated import (
    BlockPlan,
    BlockSet,
    TruncChainState,
    acceptance_prob,
    build_block_plan,
    mh_sample,
    propose_block,
)
from .field import (
    ChainConfig,
    CsnFieldModel,
    CsnParams,
    FieldRealization,
    build_model,
    case_params,
    csn_logpdf,
    empirical_moments,
    marginal_density_mc,
    simulate_field,
)
from .mle import (
    MleConfig,
    MleResult,
    consistency_study,
    fit,
    gaussian_profile_mle,
    mc_error_study,
    mc_loglik,
)
from . import inversion

__version__ = "0.1.0"
