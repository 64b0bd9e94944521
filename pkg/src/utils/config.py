"""Configuration management for SegVid."""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent.parent
DATA_DIR = Path(os.getenv("SEGVID_DATA_DIR", str(PROJECT_ROOT / "data")))
CHECKPOINT_DIR = Path(os.getenv("SEGVID_CHECKPOINT_DIR", str(DATA_DIR / "checkpoints")))
LOG_DIR = Path(os.getenv("SEGVID_LOG_DIR", str(PROJECT_ROOT / "logs")))

# Logging
LOG_LEVEL = os.getenv("SEGVID_LOG_LEVEL", "INFO")

# Reproducibility
DEFAULT_SEED = int(os.getenv("SEGVID_SEED", "42"))

# Segment granularity
SEGMENT_FRAMES = 5
MAP_TOP_K = int(os.getenv("SEGVID_MAP_TOP_K", "100000"))

# Numerics
NORM_EPS = 1e-6
PROB_CLAMP = 1e-7
KL_CLAMP = 1e-12

# Desk-scale training defaults
BATCH_SIZE = int(os.getenv("SEGVID_BATCH_SIZE", "32"))
PRETRAIN_STEPS = int(os.getenv("SEGVID_PRETRAIN_STEPS", "2000"))
FINETUNE_STEPS = int(os.getenv("SEGVID_FINETUNE_STEPS", "500"))
LEARNING_RATE = float(os.getenv("SEGVID_LEARNING_RATE", "1e-4"))
LR_DECAY = 0.9
LR_DECAY_EXAMPLES = int(os.getenv("SEGVID_LR_DECAY_EXAMPLES", "10000"))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Desk-scale synthetic data
SYNTH_CLASSES = 20
SYNTH_VIDEOS = 500
SYNTH_FRAMES = 30
VISUAL_DIM = 32
AUDIO_DIM = 8

# Bayesian weight tuning
BO_LENGTH_SCALE = 0.2
BO_NOISE = 1e-6
BO_JITTER = 1e-8
BO_INIT_SAMPLES = 5
BO_ITERATIONS = 20

# Competition-scale settings (not used at desk scale)
FULL_SCALE_CONFIGS = {
    "netvlad": {"hidden_size": 1024, "clusters": 16},
    "nextvlad_mix": {
        "groups": 8, "clusters": 112, "hidden_size": 2048,
        "expansion": 2, "gating_reduction": 16, "temperature": 3.0, "submodels": 3,
    },
    "bert": {"layers": 2, "heads": 12, "model_dim": 1152},
    "bert_l3": {"layers": 3, "heads": 12, "model_dim": 1152},
    "bert_cross": {"layers": 2, "heads": 8, "model_dim": 1152, "visual_model_dim": 1024, "audio_model_dim": 128},
    "training": {
        "batch_size": 128, "learning_rate": 1e-4,
        "lr_decay": 0.9, "lr_decay_examples": 2_000_000,
        "pretrain_steps": 200_000, "finetune_steps": 20_000,
    },
    "features": {"visual_dim": 1024, "audio_dim": 128},
    "map_top_k": 100_000,
}

# Ensure directories exist
for directory in [DATA_DIR, CHECKPOINT_DIR]:
    directory.mkdir(parents=True, exist_ok=True)
