import os
import sys

from dotenv import load_dotenv
from loguru import logger

load_dotenv()

BASE_DIR = os.path.abspath(os.path.dirname(__file__))
SCENARIO_DIR = os.path.join(BASE_DIR, 'scenarios')
GENESIS_PATH = os.path.join(BASE_DIR, 'genesis', 'genesis.yaml')
TEST_VECTOR_PATH = os.path.join(BASE_DIR, 'testdata', 'tx_vectors.txt')

# --- Environment overrides ---
DEFAULT_SEED = int(os.environ.get('TIPCUT_SEED', '1'))
OUT_DIR = os.environ.get('TIPCUT_OUT_DIR', os.path.join(BASE_DIR, 'out'))
LOG_LEVEL = os.environ.get('TIPCUT_LOG_LEVEL', 'INFO')
EXEC_WORKERS = int(os.environ.get('TIPCUT_WORKERS', '1'))

# --- Network ---
POST_GST_DELAY_MS = 50.0
PRE_GST_DELAY_FACTOR = 10.0

# --- Lanes ---
CAR_BATCH_CAP = 512
CAR_INTERVAL_MS = 50.0
FETCH_TIMEOUT_MS = 200.0
FETCH_MAX_ROUNDS = 8

# --- Consensus ---
TIMEOUT_MS = 2000.0
TIMEOUT_BACKOFF = 1.0
TIMEOUT_CAP_MS = 60000.0
CUT_IDLE_MS = 200.0
CONFIRM_GRACE_MS = 100.0
INCLUSION_GRACE_MS = 200.0

# --- Execution ---
RETRY_BUDGET = 4
MAX_PROGRAM_OPS = 255

# --- State consensus ---
MAX_STATE_LAG = 1000
SNAPSHOT_INTERVAL = 0  # 0 disables background snapshot indexing

# --- Storage ---
COLD_AFTER_BLOCKS = 10

# --- Workload ---
DUPLICATE_FRACTION = 0.1
DUPLICATE_DELAY_MS = 500.0


def configure_logging(level=None):
    """Route loguru output to stderr at the configured level"""
    logger.remove()
    logger.add(sys.stderr, level=(level or LOG_LEVEL).upper(),
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name} - {message}")
    return logger
