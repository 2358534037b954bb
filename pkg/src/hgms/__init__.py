"""Hyper-gradients for optimistic bilevel problems with non-unique lower-level minima."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    BilevelProblem,
    CgBudgetExceeded,
    DimensionMismatch,
    FeasibleSet,
    InvalidConfig,
    NonFinite,
    OracleDisagreement,
    ProblemDims,
    ToolError,
    validate_problem,
)
from .estimator import HGMS  # noqa: E402
from .hypergrad import (  # noqa: E402
    HyperGradConfig,
    exact_pseudoinverse_hypergradient,
    hypergradient,
    ridge_cg_solve,
)
from .outer import OuterConfig, RunTrace, parameter_schedule, project, run_exact_gradient, run_hgms, step  # noqa: E402
from .sampler import GibbsSamplerConfig, sample_parallel, ula_chain  # noqa: E402
from .selector import best_of_n, selection_error_sweep  # noqa: E402
from .testbed import AnalyticProblem, get_problem, list_problems  # noqa: E402

__all__ = [
    "__version__",
    "AnalyticProblem",
    "BilevelProblem",
    "CgBudgetExceeded",
    "DimensionMismatch",
    "FeasibleSet",
    "GibbsSamplerConfig",
    "HGMS",
    "HyperGradConfig",
    "InvalidConfig",
    "NonFinite",
    "OracleDisagreement",
    "OuterConfig",
    "ProblemDims",
    "RunTrace",
    "ToolError",
    "best_of_n",
    "exact_pseudoinverse_hypergradient",
    "get_problem",
    "hypergradient",
    "list_problems",
    "parameter_schedule",
    "project",
    "ridge_cg_solve",
    "run_exact_gradient",
    "run_hgms",
    "sample_parallel",
    "selection_error_sweep",
    "step",
    "ula_chain",
    "validate_problem",
]
