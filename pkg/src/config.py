"""Configuration module for loading environment variables."""
import os
import sys
from pathlib import Path
from dotenv import load_dotenv
import torch

# Load environment variables from .env file
load_dotenv()

# Check if running in test mode
IS_TESTING = "pytest" in sys.modules or os.getenv("TESTING") == "1"

# Artifact Configuration
BUNDLE_FORGE_DIR = Path(os.getenv("BUNDLE_FORGE_DIR", str(Path.cwd() / "runs")))
DEFAULT_SEED = int(os.getenv("BUNDLE_FORGE_SEED", "2024"))
WORKERS = int(os.getenv("BUNDLE_FORGE_WORKERS", "1"))
if WORKERS < 1:
    raise ValueError("BUNDLE_FORGE_WORKERS must be at least 1")

# Logging Configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_DIR = Path(os.getenv("BUNDLE_FORGE_LOG_DIR", str(BUNDLE_FORGE_DIR / "logs")))
LOG_FILE = LOG_DIR / "bundle_forge.log"

# Numerics
DTYPE = torch.float64

# World generation defaults
DEFAULT_N_ITEMS = 200
DEFAULT_N_BUNDLES = 600
DEFAULT_N_USERS = 100
DEFAULT_MEAN_BUNDLE_SIZE = 3.6
MIN_BUNDLE_SIZE = 3
DEFAULT_MEDIA_DIM = 16
SPLIT_RATIOS = (0.8, 0.1, 0.1)

# Relational embedder defaults
EMBED_DIM = 64
GRAPH_LAYERS = 2
RELATIONAL_INIT_STD = 0.1

# Fusion defaults
FUSION_DIM = 64
FUSION_LAYERS = 2
FUSION_INIT_STD = 0.02

# Language model defaults
LM_DIM = 64
LM_LAYERS = 2
LM_HEADS = 4
LM_FF_MULT = 4
CONTEXT_LENGTH = int(os.getenv("BUNDLE_FORGE_CONTEXT_LENGTH", "512"))
LORA_RANK = 8
LORA_ALPHA = 16.0
MAX_NEW_TOKENS = 4

# Training defaults
N_CANDIDATES = 10
SAMPLE_COUNT = 1024
BATCH_SIZE = 16
MAX_EPOCHS = 10
PEAK_LR = 3e-4
WARMUP_RATIO = 0.1
PATIENCE = 3
CANDIDATE_SWEEP = (2, 5, 10, 20)
