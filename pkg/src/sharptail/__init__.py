"""Sharp small-noise estimates of extreme-event probabilities for SDEs.

Instantons by adjoint-based optimization, prefactors from Fredholm
determinants or Riccati equations, Gaussian transition tubes and Monte Carlo
validation.
"""
from .core import (DiagonalLinear, FourierLinear, Path, ProblemSpec, QuadraticSystem, TimeGrid,
                   l2_inner, l2_norm, project_orthogonal)
from .propagators import (CheckpointPlan, IntegratorConfig, checkpointed_apply, gradient,
                          solve_adjoint, solve_linearized_pair, solve_state)
from .errors import (AssumptionViolation, ConfigError, DimensionError, DivergenceError, NonConvergenceError,
                     RiccatiSingularityError, SharptailError, SingularInstantonError)
from .instanton import InstantonConfig, InstantonResult, rate_function_sweep, solve_instanton
from .second_variation import SecondVariationOperator
from .spectrum import DeterminantEstimate, SpectrumResult, dominant_eigenpairs, fredholm_determinant
from .riccati import RiccatiConfig, RiccatiResult, final_time_covariance_riccati, prefactor_riccati, solve_riccati
from .estimates import (build_report, finite_dim_sorm, pdf_estimate, prefactor_fredholm, tail_probability)
from .covariance import TubeModel, build_tube, covariance_at, sample_tube_endpoint, tube_marginal
from .sampling import (McConfig, direct_tail_mc, importance_sampled_paths, is_tail_estimate,
                       wilson_interval)
from .problems import get_problem, make_kdv, make_model2d, make_ou

__version__ = "0.1.0"
