"""onenet: online knowledge distillation with a native multi-branch ensemble.

A small numpy deep-learning stack (tape autodiff, conv/BN layers), the
multi-branch gated model and its losses, training loops for the method and
its baselines, dataset readers, and the flatness / variance diagnostics.
"""

__version__ = "0.1.0"

from .config import TrainConfig, resolve_config
from .errors import ConfigError, DataError, NumericError, OneNetError
from .model import MultiBranchModel, SingleNet, build, load_checkpoint, save_checkpoint, strip

__all__ = [
    "ConfigError", "DataError", "MultiBranchModel", "NumericError", "OneNetError", "SingleNet",
    "TrainConfig", "build", "load_checkpoint", "resolve_config", "save_checkpoint", "strip",
]
