"""Sequential convex programming for stochastic optimal control with
control-affine drift and uncontrolled diffusion."""

from .linearize import LinearizedCost, LTVCoefficients, check_jacobians, linearize
from .moments import Iterate, difference_covariance, discretize, propagate
from .montecarlo import (SamplePathEnsemble, collision_rate, continuity_probe, empirical_moments,
                         simulate)
from .pmp import (AdjointTrajectory, backward_adjoint, maximality_residual, surrogate_residual,
                  terminal_multiplier)
from .problem import (BenchmarkConfig, ConfigError, Obstacle, ObstacleSet, OCPInstance, TimeGrid,
                      build_car_benchmark, default_config, eval_drift, eval_obstacle_potential,
                      load_config, make_linear_instance, parse_config)
from .scp import (SCPOptions, SCPResult, convergence_metric, initial_guess, run,
                  strict_trust_region_check)
from .solver import INFEASIBLE, MAX_ITER, OPTIMAL, SolverOptions, SubproblemSolution, kkt_residual, solve
from .subproblem import ConvexSubproblem, build, convexity_audit

__version__ = "0.1.0"
