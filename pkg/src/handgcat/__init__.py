"""Graph-guided hand mesh recovery from a single image and a 2D pose, on a numpy autodiff engine."""
from .config import RunConfig, desk_profile, load_config, parse_config
from .metrics import MetricsReport, summarize
from .model import HandGCAT, ModelConfig
from .synth import generate_dataset, load_dataset, save_dataset
from .tensor import Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "HandGCAT", "MetricsReport", "ModelConfig", "RunConfig", "Tensor", "desk_profile",
    "generate_dataset", "load_config", "load_dataset", "no_grad", "parse_config",
    "precision", "save_dataset", "summarize",
]
