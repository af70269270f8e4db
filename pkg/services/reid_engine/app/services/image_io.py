"""
RTRL DESK - PPM image files
Binary P6, 8 bits per channel. Values in [0, 1] quantize with round-half-up.
"""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from app.autograd.tensor import Tensor
from app.core.errors import ContractError, DatasetError, DimensionError


def quantize(image: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ContractError(f"image values must lie in [0, 1] (got range [{np.nanmin(image)}, {np.nanmax(image)}])")
    return np.floor(image.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def image_write(path: Union[str, Path], image: Union[np.ndarray, Tensor]) -> None:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise DimensionError(f"image_write expects [H, W, 3], got {data.shape}")
    pixels = quantize(data)
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as exc:
        raise DatasetError(f"cannot write image ({exc})", path=str(path)) from None


def image_read(path: Union[str, Path]) -> np.ndarray:
    """[H, W, 3] float32 in [0, 1]"""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read image ({exc})", path=str(path)) from None
    return pixels.astype(np.float32) / np.float32(255.0)
