"""Pan-sharpening with selective state-space (Mamba) blocks, in numpy."""
import os

# the bundled TBB is too old for numba; workqueue keeps results thread-count independent anyway
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .errors import (ConfigError, CorruptionError, DimensionError, FormatError,  # noqa: E402
                     NumericError, PanMambaError, UsageError)
from .model import (NetworkConfig, PanMambaModel, build_model, count_flops, count_params,  # noqa: E402
                    forward, load_checkpoint, save_checkpoint)
from .tensor import Tensor, backward, no_grad, precision  # noqa: E402
from .train import TrainConfig, train  # noqa: E402

__all__ = [
    "ConfigError", "CorruptionError", "DimensionError", "FormatError", "NumericError",
    "PanMambaError", "UsageError", "NetworkConfig", "PanMambaModel", "build_model",
    "count_flops", "count_params", "forward", "load_checkpoint", "save_checkpoint",
    "Tensor", "backward", "no_grad", "precision", "TrainConfig", "train",
]
