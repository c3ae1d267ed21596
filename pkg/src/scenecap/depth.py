"""Region depth statistics, spatial location features, relative-depth bias.

Depth rasters are 8-bit, 0 = nearest.  Boxes cover pixels half-open:
[x_tl, x_br) x [y_tl, y_br).
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .data import DepthMap

DEPTH_LEVELS = 256


class DegenerateBoxError(ValueError):
    """Box covers no pixels of the depth map."""


def depth_value_of_region(dm: DepthMap, box: Tuple[int, int, int, int]) -> int:
    """Modal gray value over the box; ties go to the smaller (nearer) value."""
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= dm.width and 0 <= y0 < y1 <= dm.height):
        raise DegenerateBoxError(
            f"box {box} does not cover pixels of a {dm.width}x{dm.height} map"
        )
    region = dm.values[y0:y1, x0:x1]
    counts = np.bincount(region.reshape(-1), minlength=DEPTH_LEVELS)
    # argmax returns the first maximum, which is the smallest gray value
    return int(counts.argmax())


def spatial_feature(box: Tuple[int, int, int, int], dv: int,
                    width: int, height: int) -> np.ndarray:
    """[x_tl/W, y_tl/H, x_br/W, y_br/H, dv/255]."""
    if width <= 0 or height <= 0:
        raise ValueError(f"bad frame size {width}x{height}")
    if not 0 <= dv <= 255:
        raise ValueError(f"depth value {dv} outside 0..255")
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {box} outside {width}x{height} frame")
    return np.array([x0 / width, y0 / height, x1 / width, y1 / height, dv / 255.0])


def relative_depth_matrix(dvs: Sequence[int]) -> np.ndarray:
    """Pairwise log depth ratios: R[i][j] = ln(dv_j / dv_i).

    Values are clamped to [1, 255] first so the ratio is defined at
    dv = 0.  Computed as ln(dv_j) - ln(dv_i), which makes antisymmetry
    exact in floating point.
    """
    arr = np.asarray(dvs, dtype=np.int64)
    if arr.size == 0:
        raise ValueError("need at least one depth value")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("depth values must be in 0..255")
    logs = np.log(np.clip(arr, 1, 255).astype(np.float64))
    return logs[np.newaxis, :] - logs[:, np.newaxis]
