"""Dense image and displacement-field containers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume data must be finite")
    return arr


@dataclass
class Volume:
    """Scalar (or multi-channel) voxel grid, z-major with x fastest.

    ``data`` has shape (D, H, W) for a single channel or (C, D, H, W).
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"Volume needs 3-D or 4-D data, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[-3:])

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[0]

    def channel_first(self) -> np.ndarray:
        """Data as (C, D, H, W)."""
        return self.data if self.data.ndim == 4 else self.data[None]


@dataclass
class DisplacementField:
    """Per-voxel displacement (dz, dy, dx) in voxels of its own grid.

    ``level`` counts halvings from full resolution (0 = full resolution).
    """

    data: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ValueError(f"DisplacementField needs shape (3, D, H, W), got {self.data.shape}")

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape[1:])

    @classmethod
    def zeros(cls, dims, level: int = 0) -> "DisplacementField":
        return cls(np.zeros((3, *dims), dtype=np.float32), level)

    @classmethod
    def constant(cls, dims, vector, level: int = 0) -> "DisplacementField":
        data = np.empty((3, *dims), dtype=np.float32)
        data[:] = np.asarray(vector, dtype=np.float32).reshape(3, 1, 1, 1)
        return cls(data, level)

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.data.astype(np.float64) ** 2).sum(axis=0))
