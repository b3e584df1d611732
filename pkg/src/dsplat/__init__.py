"""dsplat: CPU dynamic Gaussian splatting with dynamic/static separation.

Submodules:
    gaussian    covariances, projection, scenes and file formats
    render      tile-band rasterizer, analytic backward, PSNR/SSIM, PPM I/O
    autodiff    small reverse-mode engine, MLPs, Adam, checkpoints
    deformation offset networks, neighbor graphs, hierarchical offsets
    separation  offset variance, flow consistency, classification
    opacity     physical opacity model and importance pruning
    training    configuration, losses and the optimization loop
    scenegen    synthetic ground-truth scenes and datasets
    cli         the ``dsplat`` command
"""

from .errors import (ConfigError, DegenerateCovarianceError, DegenerateRotationError, DsplatError,
                     FormatError, InvalidInputError, NearSingularError, NumericalAbort, ShapeError,
                     StateError)
from .gaussian import Camera, Gaussian, Scene, load_scene, save_scene
from .render import psnr, ssim
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian", "Scene", "load_scene", "save_scene",
    "psnr", "ssim",
    "TrainConfig", "fit",
    "DsplatError", "InvalidInputError", "DegenerateCovarianceError", "DegenerateRotationError",
    "NearSingularError", "StateError", "ShapeError", "NumericalAbort", "ConfigError",
    "FormatError",
]
