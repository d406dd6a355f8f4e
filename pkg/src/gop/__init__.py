"""Collision avoidance as bounded overlap between Gaussian beliefs.

Modules:

* ``overlap``  minmax separator, overlap/contour conversions, Bhattacharyya
* ``chance``   overlap constraint and gradients for a drone/obstacle pair
* ``qp``       dense convex QP solvers (interior point, ADMM)
* ``scp``      sequential convex trajectory optimiser
* ``mpc``      receding-horizon simulation
* ``scenario`` scenario files, traces and summaries
"""

from .chance import DEFAULT_KAPPA, LinearizationError, constraint_gradients, constraint_pair, inflate
from .mpc import MpcConfig, SimTrace, mpc_step, run_scenario
from .overlap import (
    Gaussian,
    Separator,
    bhattacharyya,
    chi_square_quantile,
    contour_table,
    contour_to_overlap,
    monte_carlo_misclassification,
    overlap_to_contour,
    solve_lambda,
)
from .problems import head_on_spec
from .qp import QPError, QPInfeasibleError, QPResult, solve_qp
from .scenario import (
    Scenario,
    ScenarioError,
    load_scenario,
    parse_scenario,
    read_trace,
    write_trace,
)
from .scp import ObstacleTrack, ProblemSpec, SCPConfig, TrajectorySolution, rollout, scp_solve

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_KAPPA",
    "Gaussian",
    "LinearizationError",
    "MpcConfig",
    "ObstacleTrack",
    "ProblemSpec",
    "QPError",
    "QPInfeasibleError",
    "QPResult",
    "SCPConfig",
    "Scenario",
    "ScenarioError",
    "Separator",
    "SimTrace",
    "TrajectorySolution",
    "bhattacharyya",
    "chi_square_quantile",
    "constraint_gradients",
    "constraint_pair",
    "contour_table",
    "contour_to_overlap",
    "head_on_spec",
    "inflate",
    "load_scenario",
    "monte_carlo_misclassification",
    "mpc_step",
    "overlap_to_contour",
    "parse_scenario",
    "read_trace",
    "rollout",
    "run_scenario",
    "scp_solve",
    "solve_lambda",
    "solve_qp",
    "write_trace",
]
