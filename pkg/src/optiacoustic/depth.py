"""Depth images with an explicit invalid marker, and their binary file format.

File layout (little-endian): 16-byte header `b"OADP"`, uint32 H, uint32 W,
uint32 reserved (0); then H*W float32 depths row-major. Invalid pixels are
stored as 0, which never collides with a valid depth (valid depths are > 0).
In memory, invalid pixels hold NaN.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FormatError


INVALID = np.nan
DEPTH_MAGIC = b"OADP"
_HEADER = struct.Struct("<4sIII")


@dataclass
class DepthImage:
    """H×W ray-length depths in meters; NaN marks pixels with no return."""
    depths: np.ndarray

    def __post_init__(self) -> None:
        d = np.array(self.depths, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth image must be 2-D, got shape {d.shape}")
        d[~(np.isfinite(d) & (d > 0))] = INVALID
        self.depths = d

    @classmethod
    def invalid(cls, height: int, width: int) -> "DepthImage":
        return cls(np.full((height, width), INVALID))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depths.shape  # type: ignore[return-value]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depths)

    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if self.depths.size else 0.0


def write_depth(path: Union[str, Path], image: DepthImage) -> None:
    h, w = image.shape
    data = np.where(image.valid, image.depths, 0.0).astype("<f4")
    Path(path).write_bytes(_HEADER.pack(DEPTH_MAGIC, h, w, 0) + data.tobytes())


def read_depth(path: Union[str, Path]) -> DepthImage:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated depth header")
    magic, h, w, _ = _HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"{path}: bad depth magic {magic!r}")
    expected = _HEADER.size + 4 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float64)
    return DepthImage(data)
