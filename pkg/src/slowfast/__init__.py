"""Slow-fast limits of eps-gradient flows with saddle-node jumps."""

from .config import DEFAULT, Tolerances
from .critical import (
    AssumptionViolation,
    CriticalPoint,
    FoldPoint,
    find_critical_points,
    fold_census,
    refine_fold,
    transversality,
)
from .energy import Energy, Scenario, builtin_scenario, check_coercivity, load_scenario, parse_scenario_text
from .fast import Heteroclinic, canonical_phase, check_landing, heteroclinic_from_fold, omega_limit
from .flow import Trajectory, dissipation_identity_residual, exit_time, integrate_eps_flow, last_entry_time
from .slow import Branch, PiecewiseEvolution, build_slow_fast_evolution, continue_branch, eval_u, sibling_branch
from .verify import ConvergenceReport, convergence_order, graph_distance, rescaled_error, sup_error_off_jumps

__version__ = "0.1.0"
