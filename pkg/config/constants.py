"""
Constants used throughout the flow-equation engine.
"""
from typing import Dict, Tuple

# Physics defaults (mass units, hbar = g = 1)
DEFAULT_MASS: float = 1.0
DEFAULT_COUPLING: float = 1.0
HBAR: float = 1.0

# Cutoffs, in units of the mass
LAMBDA_FLOOR_SAMPLES: Tuple[float, float] = (1.0 / 50.0, 1.0 / 100.0)
LAMBDA0_LADDER: Tuple[float, ...] = (25.0, 50.0, 100.0)
DEFAULT_LAMBDA0: float = 100.0
# Below this fraction of m the regulator factor exp(-m^2/Lambda^2) is under 1e-21
LAMBDA_GRID_FLOOR: float = 1.0 / 7.0

# Engine caps
DEFAULT_L_MAX: int = 1
DEFAULT_N_MAX: int = 6
DEFAULT_N_MAX_INSERTIONS: int = 4
MAX_INSERTIONS: int = 3
MAX_MOMENTUM_NORM_LEGS: int = 12
MAX_WICK_SLOTS: int = 12

# Lambda quadrature: panels uniform in log(Lambda)
LAMBDA_PANEL_WIDTH: float = 0.1
LAMBDA_PANEL_NODES: int = 12
# Coarser panels for the interacting engine, whose nodes each carry a loop integral
ENGINE_PANEL_WIDTH: float = 0.25

# Loop momentum grid (radial generalized Gauss-Laguerre x angular product Gauss)
LOOP_RADIAL_NODES: int = 16
LOOP_ANGULAR_NODES: Tuple[int, int, int] = (6, 6, 12)
LOOP_MAX_REFINEMENTS: int = 3
LOOP_TOLERANCE: float = 1e-9
# Phased loop integrals are dropped once the contour-shift damping exceeds this exponent
PHASE_DAMPING_CUTOFF: float = 60.0

# Taylor remainder and finite differences
TAU_TOLERANCE: float = 1e-10
TAU_MAX_SUBDIVISIONS: int = 50
FD_BASE_STEP: float = 1e-3
FD_RICHARDSON_LEVELS: int = 2

# Position-space propagator quadrature
POSITION_PROPAGATOR_RTOL: float = 1e-9
MIN_EXACT_DISTANCE: float = 1e-6

# Experiment envelope
DEFAULT_DELTA_MAX: int = 8
DEFAULT_D1_MAX: int = 6
DEFAULT_TOLERANCE: float = 1e-6
PAIR_CLOSER_RATIO: float = 0.04
FACTORIZATION_RATIO: float = 0.1
# Free-sector factorization residual once every nonvanishing Wick term is summed
WICK_SUPPORT_TOLERANCE: float = 1e-8
# |x_2 - x_3| in units of 1/m for the factorization and convergence geometries
REFERENCE_SEPARATION: float = 0.5
# |x_2 - x_3| = eps, |x_1 - x_2| = eps^2; the last rung has ratio PAIR_CLOSER_RATIO
PAIR_CLOSER_EPSILONS: Tuple[float, ...] = (0.16, 0.08, 0.04)
# Acceptance factor on the Lambda0-ladder spread
SPREAD_TOLERANCE_FACTOR: float = 10.0

# Oracle comparisons
TREE_ORACLE_TOLERANCE: float = 1e-10
TADPOLE_TOLERANCE: float = 1e-6
# IR cutoffs of the tadpole checks, in units of m, inside the engine grid
SELFTEST_TADPOLE_LAMBDAS: Tuple[float, ...] = (1.0, 2.0)
OPE_CHECK_SEPARATIONS: Tuple[float, ...] = (0.5, 1.0, 2.0)

# Bound sweep grid
SWEEP_LAMBDAS: Tuple[float, ...] = (0.5, 1.0, 2.0)
SWEEP_LAMBDAS_BELOW_MASS: Tuple[float, ...] = (0.25, 0.5, 1.0)
SWEEP_MOMENTA: Tuple[float, ...] = (0.0, 0.5)
SWEEP_SEPARATIONS: Tuple[float, ...] = (0.2, 0.5, 1.0, 2.0)
GD_SUMMABILITY_DELTA: int = 60
GD_CAUCHY_TOLERANCE: float = 1e-8

# Spectator smearing: Gaussian test functions in momentum space, Gauss-Hermite nodes per axis
SPECTATOR_WIDTH: float = 0.2
SPECTATOR_HERMITE_NODES: int = 2

# Fitted-constant search bracket for assert_bound
K_SEARCH_BRACKET: Tuple[float, float] = (1.0, 1e12)
K_BISECTION_STEPS: int = 200

# Bound identifiers and the number of insertions each refers to
BOUND_FAMILIES: Dict[str, int] = {
    'propout': 0, 'prop40': 0, 'prop20': 0,
    'boundCAG1': 1, 'boundCAG0m': 0, 'boundCAG1m': 1,
    'boundCAG2': 2, 'CAG2cor': 2,
    'boundCAG3': 3, 'corCAG3': 3,
    'GDbound': 3, 'ope3conv': 3, 'partOPEbound': 3,
}

# Output file names
CONVERGENCE_CSV: str = "convergence.csv"
FACTORIZATION_CSV: str = "factorization.csv"
BOUNDS_JSON: str = "bounds.json"
SELFTEST_JSON: str = "selftest.json"
