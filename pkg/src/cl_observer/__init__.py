"""Nonlinear state observer with concurrent-learning parameter estimation."""
from .model_core import (AffineModel, DomainError, JacobianBounds, OutOfDomainWarning,
                         derive_jacobian_bounds, multiplier_matrices, sector_residuals)
from .models import BENCHMARK_THETA, benchmark_model, get_model, linear_model
from .lmi import (LmiInfeasibleError, LmiProblem, ObserverGains, solve_gains,
                  ultimate_bound_estimate, verify_gains)
from .integrator import (DenseTrajectory, RetentionError, StiffnessError, delayed_eval, integrate,
                         run_with_events)
from .observer import ObserverState, observer_rhs, regression_residual, window_regressor
from .history import HistoryStack, SchedulerState, StackEntry, info_matrix, scheduler_step, try_insert
from .estimator import ParamState, gamma_update, param_error_diag, phi, theta_update
from .sim import RunLog, Scenario, benchmark_scenario, load_scenario, pd_controller, run_scenario

__version__ = "0.1.0"
