"""rwspace: nearest-neighbor random walk in a space-time product random
environment.

Exact and Monte Carlo tools for the averaged rate function and its dual
tilts, harmonic fields and the Doob-transformed walk, the collision-series
second-moment bound, and the conditioned environment measure with its
well-definedness, stationarity, and Markov-structure oracles.
"""

__version__ = "0.1.0"

from .lattice import StepSet, l1_ball
from .environment import (Deterministic, DirichletCells, EnvDistribution,
                          EnvWindow, FiniteSupport, WindowGeometry,
                          box_geometry, cone_geometry, load_env_spec,
                          load_window, mean_kernel, sample_window, save_window,
                          shift, validate_prob_vector)
from .walks import (MarginalLaw, Path, PathEnsemble, averaged_marginal,
                    averaged_mgf_check, averaged_point_prob,
                    averaged_region_prob, quenched_path_prob,
                    quenched_step_law, simulate_quenched)
from .rate import (TiltSolution, grad_log_phi, hess_log_phi, log_phi, phi,
                   rate_function, solve_theta, tilted_step_law, velocity_lln)
from .collisions import (CollisionSeries, OverlapPotential, collision_series,
                         criterion_eta, g_sup_bound, overlap_potential,
                         recursion_G)
from .harmonic import (HarmonicField, MartingaleDiagnostics,
                       RateConvergenceTable, TiltedKernelField, compute_u,
                       doob_kernel, martingale_diagnostics,
                       quenched_rate_convergence, shift_identity_check,
                       simulate_tilted)
from .conditioned import (CellView, CylinderFunction, MuMeasureValue,
                          cell_weight, conditioned_empirics,
                          constant_function, function_from_expression,
                          markov_structure_check, mu_exact, mu_marginal,
                          mu_via_htransform, parse_function_spec,
                          probe_cylinder, product_function, shift_compose,
                          stationarity_check, step_indicator,
                          welldefined_check, zeta_diagnostic)
from .errors import (ConfigError, DomainError, EstimateUndefinedError,
                     NonConvergenceError, ResourceLimitError, RwspaceError,
                     WindowBoundsError)
