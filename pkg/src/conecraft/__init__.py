"""Reflected diffusions in convex polyhedral cones.

Skorokhod maps for oblique reflection data, constrained Euler-Maruyama
simulation, Monte Carlo floors for rescaled (and killed) transition
densities, and exit-time leveling diagnostics, plus a config-driven batch
runner.
"""

__version__ = "0.1.0"

from .density import (FloorReport, HistogramGrid, MinorizationGeometry,
                      chapman_floor_compose, killed_kernel_floor,
                      minorization_check, terminal_histogram, wilson_lower)
from .errors import (ConecraftError, ConeValidationError, ConfigError,
                     DimensionLimit, GeometryError, IncompatibleGeometry,
                     NoConvergence, OutsideCone, PreconditionError,
                     StartOutside)
from .geometry import (FaceActivity, PolyhedralCone, StabilityReport,
                       ValidationReport, active_faces, check_drift_stability,
                       halfline, orthant, skewed_orthant_2d, stability_margin,
                       validate_cone)
from .harness import ExperimentConfig, RunManifest, main, parse_config, run
from .leveling import (ExitSample, GapCurve, PsiGapCurve, leveling_gap,
                       psi_class_check, psi_gap, sample_exit)
from .models import (constant_model, halfline_stable, halfline_zero,
                     make_model, reference_2d, variable_2d)
from .rng import seed_stream
from .simulate import (BallDomain, DiffusionModel, HalfspaceDomain, SimPath,
                       classify_start, coupled_scaling_gap, flow_ode,
                       read_increments, simulate_path, simulate_scaled,
                       step_euler, terminal_batch, validate_model,
                       write_increments)
from .skorokhod import (LipschitzProbe, PiecewisePath, ReflectedPath,
                        ReflectionMatrix, lipschitz_probe, project_step,
                        random_path_pairs, reflect_halfline,
                        reflection_matrix, solve_sp, solve_sp_grid,
                        solve_sp_many)
