"""Newton-Kantorovich iteration for decoupled forward-backward SDEs."""

from .benchmarks import BenchmarkCase, case_noise, catalog, get_case, oracle_solution
from .constants import ConstantsReport, evaluate_constants
from .core import (
    BrownianBundle,
    DerivativeBounds,
    FbsdeProblem,
    TimeGrid,
    TripleProcess,
    combined_norm,
    estimate_h2_norm,
    estimate_s2_norm,
    estimate_weighted_norm,
    make_noise,
)
from .errors import (
    FbsdeError,
    InvalidArgumentError,
    NumericalBlowupError,
    OracleError,
    RateViolationError,
    SingularRegressionError,
    StepSizeError,
)
from .forward import forward_newton_step, run_forward_newton, simulate_euler
from .linear_bsde import RegressionConfig, regress, solve_linear_bsde
from .newton import (
    LinearizedProblem,
    initial_iterate,
    linearize,
    newton_step,
    run_newton,
    run_picard,
)
from .operator import evaluate_residual, gateaux_derivative, remainder, remainder_decomposition
from .record import ConvergenceRecord

__version__ = "0.1.0"
