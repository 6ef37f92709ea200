"""
Configuration for the tinysr-search skill
Centralizes constants, hyper-parameter tables, paths and logging setup
"""

import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

# Paths
SKILL_DIR = Path(__file__).parent.parent
DATA_DIR = SKILL_DIR / "data"

load_dotenv(SKILL_DIR / ".env")

RUN_ROOT_ENV = "TINYSR_RUN_ROOT"
DEFAULT_RUN_ROOT = Path(os.environ.get(RUN_ROOT_ENV, DATA_DIR / "runs"))

# Run directory layout
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
SEARCH_LOG_FILE = "search_log.jsonl"
CONTROLLER_CKPT_FILE = "controller.ckpt"
CACHE_DIR_NAME = "cache"
SNAPSHOT_DIR_NAME = "snapshots"
CACHE_INDEX_FILE = "index.json"

# Schema versions
GENOME_SCHEMA_VERSION = 1
SNAPSHOT_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

# Search spaces
NUM_CELL_NODES = 10
NUM_REDUCTION_BLOCKS = 5
DEFAULT_CHANNELS = 16           # n for both generator and discriminator
GROUP_COUNT = 4                 # g of the grouped convolutions
INVBLOCK_EXPANSION = 2          # e of the inverted bottleneck
ATTENTION_REDUCTION = 4         # SE / CA squeeze ratio

# Cost convention: Mult-Adds to produce one 1280x720 output image
REFERENCE_RESOLUTION = (1280, 720)   # (width, height)
DEFAULT_MULT_ADDS_LIMIT = 5.0e9

# Controller
CONTROLLER_HIDDEN = 100
CONTROLLER_TANH_CONSTANT = 2.5
CONTROLLER_TEMPERATURE = 5.0
CONTROLLER_LR = 3.5e-4
CONTROLLER_INIT_RANGE = 0.1
REWARD_EMA_DECAY = 0.95
ENTROPY_WEIGHT = 1e-4
GATE_PENALTY_REWARD = -1.0

# Adam
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Tensor kit
PRELU_INIT = 0.25
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SPECTRAL_EPS = 1e-12

# Training: (proxy, full) hyper-parameter tables
TRAIN_LR = 1e-4
TRAIN_LR_DECAYED = 5e-5
TRAIN_LR_DECAY_EPOCH = 200

DISTORTION_PROXY = {"epochs": 50, "batch": 64, "lr_patch": 12}
DISTORTION_FULL = {"epochs": 450, "batch": 16, "lr_patch": 48}

GAN_PROXY = {"epochs": 50, "batch": 32, "hr_patch": 32, "feature_depth": 2}
GAN_FULL = {"epochs": 450, "batch": 16, "hr_patch": 64, "feature_depth": 3}
GAN_LOSS_WEIGHTS = (0.01, 1.0, 0.005)   # (alpha, lambda, gamma)
SMOOTHING_WINDOW = 3

PSNR_CAP_DB = 100.0

# Search budgets
DEFAULT_GENERATOR_STEPS = 200
DEFAULT_DISCRIMINATOR_STEPS = 50
SURROGATE_GENERATOR_STEPS = 2500
MAX_CONSECUTIVE_REJECTS = 10000

# Logging
LOG_FORMAT = "%(message)s"
VERBOSE_LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Route all diagnostics to stderr; stdout stays machine-readable"""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(VERBOSE_LOG_FORMAT if verbose else LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
