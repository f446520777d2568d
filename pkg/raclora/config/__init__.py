import os
from pathlib import Path

from ..core.optimizers import DIVERGENCE_FACTOR
from ..errors import InvalidConfig

# Base paths
ROOT_DIR = Path(__file__).parent.parent.parent
PRESETS_DIR = Path(__file__).parent / 'presets'
OUTPUT_DIR = ROOT_DIR / 'output'

# Environment variables
ENV_SEED = 'RACLORA_SEED'
ENV_OUTPUT_DIR = 'RACLORA_OUTPUT_DIR'
ENV_LOG_LEVEL = 'RACLORA_LOG_LEVEL'


class Config:
    """Base configuration."""
    DEFAULT_SEED = 0
    DEFAULT_WORKERS = 1
    DIVERGENCE_FACTOR = DIVERGENCE_FACTOR
    PINV_REL_TOL = None  # None selects 1e-12 * max(shape)
    MC_SAMPLES = 10_000
    GAP_THRESHOLD = 1e-6

    LOG_LEVEL = 'INFO'
    LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'

    OUTPUT_DIR = str(OUTPUT_DIR)

    @classmethod
    def seed(cls) -> int:
        """RACLORA_SEED when set, else the class default."""
        value = os.getenv(ENV_SEED)
        if value in (None, ''):
            return cls.DEFAULT_SEED
        try:
            return int(value)
        except ValueError:
            raise InvalidConfig(f"{ENV_SEED} must be an integer, got '{value}'") from None

    @classmethod
    def output_dir(cls) -> Path:
        return Path(os.getenv(ENV_OUTPUT_DIR) or cls.OUTPUT_DIR)

    @classmethod
    def log_level(cls) -> str:
        return (os.getenv(ENV_LOG_LEVEL) or cls.LOG_LEVEL).upper()


# Re-export the experiment configuration classes and the preset registry
from .experiment_config import ExperimentConfig, ExperimentConfigManager, experiment_config  # noqa: E402
