"""Low-light stereo image enhancement on a small float64 autodiff core."""

from .network import Model, ModelConfig, build_model, forward
from .tensor import Tape, Tensor

__all__ = ["Model", "ModelConfig", "Tape", "Tensor", "build_model", "forward"]
__version__ = "0.1.0"
