"""Multi-modal residual perceptron networks on a small numpy autodiff core."""

from . import bench, components, fusion_nets, gradcore, preproc, synthlab, temporal
from .fusion_nets import ModelConfig, Network, NetworkVariant, build

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Network",
    "NetworkVariant",
    "bench",
    "build",
    "components",
    "fusion_nets",
    "gradcore",
    "preproc",
    "synthlab",
    "temporal",
]
