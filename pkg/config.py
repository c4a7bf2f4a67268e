from os import getenv
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


# ---------------------------------------------------------------------------
# File Configuration
# ---------------------------------------------------------------------------

BASE_PATH = Path(__file__).parent

# Root for run artifacts (CSVs, manifests, summaries).
# Override per checkout with NNLIF_OUT_ROOT in .env
OUT_PATH = Path(getenv("NNLIF_OUT_ROOT") or BASE_PATH / "out")
OUT_PATH.mkdir(parents=True, exist_ok=True)

# Path to save library logs
LOG_PATH = BASE_PATH / "log"
LOG_PATH.mkdir(exist_ok=True)

# Worker threads for sweeps and particle chunks when --threads is not given
DEFAULT_THREADS = int(getenv("NNLIF_THREADS", "4"))


# ---------------------------------------------------------------------------
# Grid and Density Configuration
# ---------------------------------------------------------------------------

# Relative slack when rounding (bound - V)/dv to a whole number of cells.
GRID_ROUNDING_TOL = 1e-9

# Default truncation is V_F - 5*max(1, sqrt(a)+|V_R|+b) .. V_F + 5*max(1, sqrt(a)+b)
DEFAULT_BOUND_FACTOR = 5.0

# Round-off below this is treated as zero density; anything more negative is a scheme failure.
NEGATIVE_TOL = 1e-13

# Initial data whose mass differs from 1 by more than this is rejected, smaller deficits are rescaled.
INIT_MASS_TOL = 1e-6


# ---------------------------------------------------------------------------
# Solver Configuration
# ---------------------------------------------------------------------------

# Tail floor used when the super-threshold mass vanishes (possible at tau=0).
M_FLOOR = 1e-14

# Fraction of the advection CFL limit used by adaptive stepping.
CFL_SAFETY = 0.4

# Relative slack accepted on a user-given step before it counts as a CFL violation.
CFL_SLACK = 1e-12

# Optional fixed-point iteration on Q within one step.
PICARD_MAX_ITER = 10
PICARD_TOL = 1e-12

# Hard stop for runaway runs (steps per run).
MAX_STEPS = 50_000_000

# Number of samples when sample_every is not given.
DEFAULT_SAMPLES = 100


# ---------------------------------------------------------------------------
# Blow-up Analytics Configuration
# ---------------------------------------------------------------------------

# Bisection tolerance is BLOWUP_ROOT_TOL * max(1, (V_F - V_R)/b).
BLOWUP_ROOT_TOL = 1e-10

# m(delta) at or below this counts as zero (grazing profiles, root detection).
BLOWUP_M_TOL = 1e-12

# Allowed mass deficit of a post-blow-up profile.
BLOWUP_MASS_TOL = 1e-10

# Lower bound on b*F(delta)/delta before the Dirichlet condition counts as lost.
DIRICHLET_TOL = 1e-9


# ---------------------------------------------------------------------------
# Experiments Configuration
# ---------------------------------------------------------------------------

# A sample belongs to I_bl when M > max(IBL_THRESHOLD_FACTOR * eps, IBL_THRESHOLD_MIN).
IBL_THRESHOLD_FACTOR = 10.0
IBL_THRESHOLD_MIN = 1e-6

# Discharge concentration window w = S_WINDOW_FACTOR * sqrt(a * eps).
S_WINDOW_FACTOR = 3.0

# Chained blow-up analytics gives up after this many events.
CHAIN_MAX_EVENTS = 200

# Consecutive zero-length detections before the chain reports a stall.
CHAIN_MAX_STALLS = 50


# ---------------------------------------------------------------------------
# Particle Configuration
# ---------------------------------------------------------------------------

# Particles per RNG stream / worker task. Fixed so results do not depend on thread count.
PARTICLE_CHUNK = 4096

# Output bins per unit time when no bin width is given.
PARTICLE_BINS_PER_UNIT = 20


# ---------------------------------------------------------------------------
# Output Configuration
# ---------------------------------------------------------------------------

# 17 significant digits round-trip every float64.
CSV_FLOAT_FORMAT = ".17g"


# ---------------------------------------------------------------------------
# Desk Configuration (validate)
# ---------------------------------------------------------------------------

DESK_A = 1.0
DESK_V_R = 0.0
DESK_V_F = 1.0
DESK_V_MIN = -4.0
DESK_V_MAX = 3.0
DESK_DV = 0.005
DESK_EPS_LIST = (1e-1, 1e-2, 1e-3)
DESK_SEED = 20240601
