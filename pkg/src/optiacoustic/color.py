"""Luminance histogram equalization for exported point colors.

Only rendered output is corrected; images handed to a pointmap provider are
left as captured.
"""

import cv2
import numpy as np


def color_correct(img: np.ndarray) -> np.ndarray:
    """Equalize the luma channel of an 8-bit RGB image, keeping chroma."""
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an 8-bit HxWx3 RGB image, got {img.dtype} {img.shape}")
    ycrcb = cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2YCrCb)
    ycrcb[:, :, 0] = cv2.equalizeHist(ycrcb[:, :, 0])
    return cv2.cvtColor(ycrcb, cv2.COLOR_YCrCb2RGB)
