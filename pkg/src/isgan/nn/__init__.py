from . import functional
from .gradcheck import GradCheckReport, grad_check, run_suite
from .layers import (
    SPP,
    Activation,
    AffineRescale,
    AvgPool,
    BatchNorm2d,
    Conv2d,
    ConvBlock,
    InceptionResidual,
    LayerSpec,
    Linear,
    xavier_init_,
)

__all__ = [
    "functional", "GradCheckReport", "grad_check", "run_suite", "SPP", "Activation",
    "AffineRescale", "AvgPool", "BatchNorm2d", "Conv2d", "ConvBlock", "InceptionResidual",
    "LayerSpec", "Linear", "xavier_init_",
]
