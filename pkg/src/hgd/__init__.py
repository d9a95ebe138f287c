"""Hierarchical granularity discrimination for structure-preserving unpaired translation."""
from .config import AblationFlags, ConfigError, LossConfig, NetConfig, RunConfig, TrainConfig
from .memory_bank import MemoryBank, build_bank

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "ConfigError", "LossConfig", "MemoryBank", "NetConfig", "RunConfig",
    "TrainConfig", "build_bank", "__version__",
]
