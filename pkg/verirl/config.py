"""
Global Configuration for verirl

Values come from the process environment (a local .env file is loaded
first) and fall back to the defaults below. Command-line flags and
config files override these at the call site.
"""
import os
import logging
from typing import Mapping, Optional

from dotenv import load_dotenv, dotenv_values

load_dotenv()

# General
SEED = int(os.getenv("VERIRL_SEED", "0"))
LOG_LEVEL = os.getenv("VERIRL_LOG_LEVEL", "INFO").upper()
LOGGING_LEVEL = logging.getLevelName(LOG_LEVEL)
OUT_DIR = os.getenv("VERIRL_OUT_DIR", "./runs")

# Reward weights: w_f + w_a = 1 and w_t + w_p = 1
W_FORMAT = float(os.getenv("VERIRL_W_F", "0.1"))
W_ACCURACY = float(os.getenv("VERIRL_W_A", "0.9"))
W_TYPE = float(os.getenv("VERIRL_W_T", "0.2"))
W_PARAM = float(os.getenv("VERIRL_W_P", "0.8"))
THINK_OPEN = os.getenv("VERIRL_THINK_OPEN", "<think>")
THINK_CLOSE = os.getenv("VERIRL_THINK_CLOSE", "</think>")
ANSWER_MARKER = os.getenv("VERIRL_ANSWER_MARKER", "boxed")

# Answer verification
MATH_TOLERANCE = float(os.getenv("VERIRL_MATH_TOLERANCE", "1e-9"))
SAMPLE_POINTS = int(os.getenv("VERIRL_SAMPLE_POINTS", "8"))
MAX_RESAMPLES = int(os.getenv("VERIRL_MAX_RESAMPLES", "16"))

# GRPO
GROUP_SIZE = int(os.getenv("VERIRL_GROUP_SIZE", "16"))
CLIP_EPSILON = float(os.getenv("VERIRL_CLIP_EPSILON", "0.2"))
KL_BETA = float(os.getenv("VERIRL_KL_BETA", "0.01"))
SIGMA_MIN = float(os.getenv("VERIRL_SIGMA_MIN", "1e-6"))
LEARNING_RATE = float(os.getenv("VERIRL_LEARNING_RATE", "0.05"))
BATCH_SIZE = int(os.getenv("VERIRL_BATCH_SIZE", "32"))
RATIO_CAP = float(os.getenv("VERIRL_RATIO_CAP", "1e6"))

# Curriculum budgets for FRA, CMRA, MRE
PHASE_STEPS = {
    "FRA": int(os.getenv("VERIRL_FRA_STEPS", "500")),
    "CMRA": int(os.getenv("VERIRL_CMRA_STEPS", "500")),
    "MRE": int(os.getenv("VERIRL_MRE_STEPS", "1000")),
}

# Decontamination
NGRAM_SIZE = int(os.getenv("VERIRL_NGRAM_SIZE", "32"))
SIMILARITY_THRESHOLD = float(os.getenv("VERIRL_SIMILARITY_THRESHOLD", "0.95"))
EMBEDDING_DIM = int(os.getenv("VERIRL_EMBEDDING_DIM", "256"))

# Training diagnostics: gradient spot check every N steps, 0 disables
GRAD_CHECK_EVERY = int(os.getenv("VERIRL_GRAD_CHECK_EVERY", "0"))

# Rollout dump to <out_dir>/rollouts.jsonl every N steps, 0 disables
DUMP_ROLLOUTS_EVERY = int(os.getenv("VERIRL_DUMP_ROLLOUTS_EVERY", "0"))


def read_config_file(path: Optional[str]) -> Mapping[str, Optional[str]]:
    """Reads a flat KEY=VALUE file, returning an empty mapping for no path"""
    if not path:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Config file '{path}' was not found.")
    return dotenv_values(path)
