"""Dense RGB-D SLAM on a hybrid neural scene field (hash grid, tri-planes, one-blob)."""

from .config import Config, ConfigError, parse_config
from .field import SceneField
from .slam import SlamPipeline

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "SceneField", "SlamPipeline", "parse_config", "__version__"]
