from typing import Dict, Tuple


# Model defaults
DEFAULT_INPUT_DIM: int = 1024          # ResNet / UNI feature width
DEFAULT_HIDDEN_DIM: int = 512
DEFAULT_NUM_CLASSES: int = 2
DEFAULT_NUM_LEVELS: int = 3
DEFAULT_NUM_EXPERTS: int = 4
DEFAULT_TOP_K: int = 2
DEFAULT_STATIC_DEPTH: int = 2
DEFAULT_DYNAMIC_DEPTH: int = 6
DEFAULT_STATE_DIM: int = 16
DEFAULT_CONV_WIDTH: int = 4
DEFAULT_EXPAND: int = 2
DEFAULT_FFN_HIDDEN_DIM: int = 1024
DEFAULT_ATTENTION_DIM: int = 256
DEFAULT_LAYER_NORM_EPS: float = 1e-5

# Two published values for the balance weight; 0.001 is the default.
TABLE_BALANCE_WEIGHT: float = 0.01
DEFAULT_BALANCE_WEIGHT: float = 0.001

MODEL_VARIANTS: Tuple[str, ...] = ("full", "wo_r", "wo_moe", "moeffn")
SCAN_SCHEMES: Tuple[str, ...] = ("region_nested", "resolution_ordered")

# Training protocol
DEFAULT_LEARNING_RATE: float = 1e-4
DEFAULT_BETAS: Tuple[float, float] = (0.9, 0.999)
DEFAULT_ADAM_EPS: float = 1e-8
DEFAULT_EPOCHS: int = 15
DEFAULT_SEED: int = 0

# Synthetic dataset
DEFAULT_SYNTHETIC_CLASSES: int = 3
DEFAULT_SLIDES_PER_CLASS: int = 30
DEFAULT_SYNTHETIC_ROOTS: int = 6
DEFAULT_SYNTHETIC_FANOUTS: Tuple[int, ...] = (2, 2)
DEFAULT_SYNTHETIC_INPUT_DIM: int = 32
DEFAULT_SIGNAL_STRENGTH: float = 2.0
DEFAULT_NOISE_SIGMA: float = 1.0
DEFAULT_SIGNAL_FRACTION: float = 0.5
DEFAULT_DECOY_FRACTION: float = 1.0 / 6.0
DEFAULT_SPLIT_RATIOS: Tuple[float, float, float] = (0.7, 0.1, 0.2)

# File layout
MANIFEST_FILE_NAME = "manifest.csv"
METRICS_FILE_NAME = "metrics.csv"
LAST_CHECKPOINT_NAME = "last.mckp"
BEST_CHECKPOINT_NAME = "best.mckp"
RUN_CONFIG_NAME = "run_config.json"
BAG_SUFFIX = ".mbag"

# Exit codes of the command line
EXIT_CODES: Dict[str, int] = {
    "success": 0,
    "unexpected": 1,
    "contract": 2,
    "io": 3,
    "numeric": 4,
}

THREADS_ENV_VAR = "MOEMIL_THREADS"
