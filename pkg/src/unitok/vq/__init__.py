from .media import MediaClip, MediaFormatError, VisionGrid, load_clip, load_grid, save_clip, save_grid
from .metrics import PSNR_CAP, psnr, ssim
from .tokenizer import (
    Quantized,
    TokenizerConfig,
    VisionTokenizer,
    fit,
    group_norm,
    nearest_codes,
    quantize,
    train_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
