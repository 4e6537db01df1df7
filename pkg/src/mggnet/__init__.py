"""Multi-group attribute recognition on a small numpy autodiff engine."""

from .config import RunConfig
from .groups import AttributeCatalog, GroupAssignment, load_default_assignment
from .model import MGGNet, ModelConfig
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttributeCatalog",
    "GroupAssignment",
    "MGGNet",
    "ModelConfig",
    "RunConfig",
    "Tape",
    "Tensor",
    "backward",
    "load_default_assignment",
    "no_grad",
]
