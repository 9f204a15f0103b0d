"""Cylindrical cropping and sliding-window tiling over large scenes.

Cylinders avoid cutting trees vertically; blocks are addressed by a
deterministic row-major grid index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .core import PointCloud
from .errors import ConfigError, EmptyBlock, EmptyInput

# Tolerance when counting grid steps, so exact-multiple spans do not gain a
# spurious extra row from floating-point noise.
_GRID_EPS = 1e-9


@dataclass(eq=False)
class CylinderBlock:
    """A vertical cylinder crop: member point indices into the parent cloud."""

    center_xy: npt.NDArray[np.float64]
    radius: float
    point_indices: npt.NDArray[np.int64]
    block_id: int

    def __post_init__(self) -> None:
        self.center_xy = np.asarray(self.center_xy, dtype=np.float64).reshape(2)
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.point_indices)


def cylinder_crop(cloud: PointCloud, center_xy, radius: float, block_id: int = 0) -> CylinderBlock:
    """Select the points with horizontal distance <= radius (boundary inclusive).

    Raises:
        EmptyBlock: no point falls inside; callers may skip such blocks.
    """
    if radius <= 0:
        raise ConfigError(f"radius must be positive, got {radius}")
    center = np.asarray(center_xy, dtype=np.float64).reshape(2)
    delta = cloud.positions[:, :2] - center
    inside = (delta[:, 0] ** 2 + delta[:, 1] ** 2) <= radius**2
    indices = np.flatnonzero(inside)
    if len(indices) == 0:
        raise EmptyBlock(f"no points within {radius} m of center {tuple(center)}")
    return CylinderBlock(center_xy=center, radius=float(radius), point_indices=indices, block_id=block_id)


def _axis_steps(lo: float, hi: float, stride: float) -> npt.NDArray[np.float64]:
    span = hi - lo
    n = int(np.ceil(span / stride - _GRID_EPS)) + 1 if span > 0 else 1
    return lo + stride * np.arange(n)


def sliding_window_centers(min_xy, max_xy, stride: float) -> npt.NDArray[np.float64]:
    """Axis-aligned grid of block centers covering the bounds.

    The first center sits at the bounds minimum and the last center of each
    axis is >= the bounds maximum. Centers are returned in row-major order
    (x slow, y fast), which also defines block ids.
    """
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    lo = np.asarray(min_xy, dtype=np.float64).reshape(2)
    hi = np.asarray(max_xy, dtype=np.float64).reshape(2)
    if np.any(hi < lo):
        raise ConfigError(f"bounds min {tuple(lo)} exceeds max {tuple(hi)}")
    xs = _axis_steps(lo[0], hi[0], stride)
    ys = _axis_steps(lo[1], hi[1], stride)
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2)


def tile_cloud(cloud: PointCloud, radius: float, stride: float) -> list[CylinderBlock]:
    """Tile a cloud with cylinders on the sliding-window grid of its xy extent.

    Block ids are the row-major grid indices; empty cells are skipped but
    keep their id reserved so ids stay stable across configurations.
    """
    if cloud.n == 0:
        raise EmptyInput("cannot tile an empty point cloud")
    centers = sliding_window_centers(cloud.positions[:, :2].min(axis=0), cloud.positions[:, :2].max(axis=0), stride)
    blocks = []
    for block_id, center in enumerate(centers):
        try:
            blocks.append(cylinder_crop(cloud, center, radius, block_id=block_id))
        except EmptyBlock:
            continue
    return blocks


def random_crop_center(cloud: PointCloud, rng_seed) -> npt.NDArray[np.float64]:
    """The xy of a uniformly sampled cloud point; deterministic given the seed.

    Drawing from data points rather than the plot area guarantees non-empty
    crops in sparse scenes.
    """
    if cloud.n == 0:
        raise EmptyInput("cannot sample a crop center from an empty cloud")
    rng = np.random.default_rng(rng_seed)
    idx = int(rng.integers(0, cloud.n))
    return cloud.positions[idx, :2].copy()
