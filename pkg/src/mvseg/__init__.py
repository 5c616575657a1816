"""Multi-view shape-prior segmentation of short-axis cardiac slices on synthetic phantoms."""
from .errors import MVSegError
from .mv_unet import MVUNet, MVUNetConfig, unet2d
from .shape_mae import ShapeMAE

__version__ = "0.1.0"

__all__ = ["MVSegError", "MVUNet", "MVUNetConfig", "ShapeMAE", "unet2d", "__version__"]
