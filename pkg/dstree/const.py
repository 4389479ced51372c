"""Constants for the Dynamical Systems Tree library."""

import logging

LOGGER = logging.getLogger(__package__)

# Document keys
DOC_TOPOLOGY = "topology"
DOC_PARAMS = "params"
DOC_NUM_STEPS = "T"
DOC_LEAVES = "leaves"
DOC_Y = "y"
DOC_OBSERVED = "observed"

NODE_ID = "id"
NODE_KIND = "kind"
NODE_PARENT = "parent"
NODE_K = "k"
NODE_X_DIM = "x_dim"
NODE_Y_DIM = "y_dim"

AGGREGATOR_FIELDS = ["phi0", "phi"]
LEAF_FIELDS = ["psi0", "psi", "mu0", "q0", "A", "Q", "C", "R"]

# Tolerances
NORMALIZATION_TOLERANCE = 1e-9
PRECISION_EIGENVALUE_MIN = 1e-12
MONOTONICITY_SLACK = 1e-6
MIN_STATE_WEIGHT = 1e-8

# Variational inference
DEFAULT_JITTER = 0.01
DEFAULT_INNER_ITERATIONS = 1

# Initialization
INIT_TABLE_JITTER = 0.05
INIT_EMISSION_NOISE_FRACTION = 0.1

# EM defaults
DEFAULT_SEED = 0
DEFAULT_E_TOL = 1e-6
DEFAULT_EM_TOL = 1e-5
DEFAULT_MAX_SWEEPS = 200
DEFAULT_MAX_EM_ITERS = 100
DEFAULT_COVARIANCE_FLOOR = 1e-6
DEFAULT_ETA_INIT = 1.0
DEFAULT_ETA_GROW = 1.1
DEFAULT_ETA_SHRINK = 0.5

# Oracle limits
DEFAULT_MAX_DISCRETE_PATHS = 100000
DEFAULT_MAX_JOINT_GAUSSIAN_DIM = 64

# CLI
ENV_SEED = "DST_SEED"
ENV_EM_TOL = "DST_EM_TOL"
SIGNIFICANT_DIGITS = 9

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3
