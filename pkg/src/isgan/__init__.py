"""Hide a gray image inside the luma channel of a color image with CNNs."""
from .errors import *  # noqa: F401,F403
from .image import (
    GrayImage,
    RasterImage,
    extract_luma,
    load_image,
    replace_luma,
    rgb_to_ycbcr,
    save_image,
    to_gray,
    to_rgb,
    ycbcr_to_rgb,
)
from .metrics import LossWeights, SsimConfig, ms_ssim, mse, psnr, ssim, total_loss
from .networks import (
    Decoder,
    Encoder,
    Steganalyzer,
    build_decoder,
    build_encoder,
    build_steganalyzer,
    hide,
    reveal,
    steganalyze,
)

__version__ = "0.1.0"
