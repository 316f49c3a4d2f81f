"""Dense tensor primitives: feature maps, motion fields, masks, and warping.

All grids are (height, width) with values stored row-major as float64.
Motion fields hold backward displacements: position ``p`` of the output
samples the source at ``p + displacement(p)``, in grid-pixel units.
Every operation here is a pure function on immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


def _frozen_f64(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """An (height, width, channels) map of finite real-valued features.

    ``layer_id`` optionally records which network layer produced the map.
    The backing array is copied and marked read-only on construction.
    """

    data: np.ndarray
    layer_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_f64(self.data))
        if self.data.ndim != 3:
            raise ContractViolation(
                f"feature map must be (h, w, c), got shape {self.data.shape}"
            )
        if min(self.data.shape) < 1:
            raise ContractViolation(f"degenerate feature map shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class MotionField:
    """Backward displacement field, shape (height, width, 2) as (dy, dx)."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_f64(self.data))
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ContractViolation(
                f"motion field must be (h, w, 2), got shape {self.data.shape}"
            )
        if min(self.data.shape[:2]) < 1:
            raise ContractViolation(f"degenerate motion field shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractViolation("motion field contains non-finite displacements")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "MotionField":
        return cls(np.zeros((height, width, 2)))

    @classmethod
    def uniform(cls, height: int, width: int, dy: float, dx: float) -> "MotionField":
        data = np.empty((height, width, 2))
        data[..., 0] = dy
        data[..., 1] = dx
        return cls(data)


@dataclass(frozen=True)
class BinaryMask:
    """An (height, width) mask whose entries are exactly 0 or 1."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ContractViolation(f"mask must be 2-d, got shape {self.values.shape}")
        raw = np.asarray(self.values)
        if not np.all((raw == 0) | (raw == 1)):
            raise ContractViolation("mask values must be exactly 0 or 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape

    def mean(self) -> float:
        return float(np.count_nonzero(self.values)) / self.values.size


def _bilinear_sample(data: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample (h, w, c) data at float coordinates, clamp-to-edge.

    Uses nested lerps so that integer coordinates reproduce source values
    exactly and the result never leaves the hull of the four neighbours.
    """
    h, w = data.shape[:2]
    sy = np.clip(sy, 0.0, float(h - 1))
    sx = np.clip(sx, 0.0, float(w - 1))
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def _sample_coords(motion: MotionField) -> tuple[np.ndarray, np.ndarray]:
    h, w = motion.grid
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    return yy + motion.data[..., 0], xx + motion.data[..., 1]


def warp(src: FeatureMap, motion: MotionField) -> FeatureMap:
    """Backward-warp ``src`` along ``motion``.

    Output position ``p`` is the bilinear sample of ``src`` at
    ``p + motion(p)``; sample coordinates outside the grid are clamped to
    the border. Output dimensions equal the source's.
    """
    if src.grid != motion.grid:
        raise ContractViolation(
            f"warp grid mismatch: feature {src.grid} vs motion {motion.grid}"
        )
    sy, sx = _sample_coords(motion)
    return FeatureMap(_bilinear_sample(src.data, sy, sx), layer_id=src.layer_id)


def warp_backward(
    src: FeatureMap, motion: MotionField, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``warp`` w.r.t. the source features and the motion field.

    ``grad_out`` is the upstream gradient with the output's shape. Returns
    ``(grad_src, grad_motion)``. At clamped sample coordinates the motion
    gradient is zero (the clamp is flat); at exact integer coordinates the
    right-hand derivative is used.
    """
    if src.grid != motion.grid:
        raise ContractViolation("warp_backward grid mismatch")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    h, w = src.grid
    sy_raw, sx_raw = _sample_coords(motion)
    sy = np.clip(sy_raw, 0.0, float(h - 1))
    sx = np.clip(sx_raw, 0.0, float(w - 1))
    unclamped_y = (sy_raw > 0.0) & (sy_raw < float(h - 1))
    unclamped_x = (sx_raw > 0.0) & (sx_raw < float(w - 1))

    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0

    v00 = src.data[y0, x0]
    v01 = src.data[y0, x1]
    v10 = src.data[y1, x0]
    v11 = src.data[y1, x1]

    # d(out)/d(sy) = bottom - top edge; d(out)/d(sx) interpolates the row slopes
    d_dy = (v10 - v00) + fx[..., None] * ((v11 - v10) - (v01 - v00))
    d_dx = (v01 - v00) + fy[..., None] * ((v11 - v10) - (v01 - v00))
    grad_motion = np.zeros((h, w, 2))
    grad_motion[..., 0] = np.sum(grad_out * d_dy, axis=-1) * unclamped_y
    grad_motion[..., 1] = np.sum(grad_out * d_dx, axis=-1) * unclamped_x

    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    grad_src = np.zeros_like(src.data)
    np.add.at(grad_src, (y0, x0), w00[..., None] * grad_out)
    np.add.at(grad_src, (y0, x1), w01[..., None] * grad_out)
    np.add.at(grad_src, (y1, x0), w10[..., None] * grad_out)
    np.add.at(grad_src, (y1, x1), w11[..., None] * grad_out)
    return grad_src, grad_motion


def resize_mask_nearest(mask: BinaryMask, new_h: int, new_w: int) -> BinaryMask:
    """Resize a binary mask with nearest-neighbour lookup.

    Source index for destination index ``i`` is
    ``floor((i + 0.5) * src_size / dst_size)`` (half-pixel centers).
    """
    if new_h < 1 or new_w < 1:
        raise ContractViolation(f"target mask size must be positive, got {new_h}x{new_w}")
    h, w = mask.grid
    ys = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.intp), w - 1)
    return BinaryMask(np.asarray(mask.values)[np.ix_(ys, xs)])


def resize_motion_bilinear(motion: MotionField, new_h: int, new_w: int) -> MotionField:
    """Resample a motion field to a new grid, rescaling displacement magnitudes.

    Components are bilinearly sampled under the half-pixel-center mapping and
    then scaled by the per-axis resolution ratio so the displacements stay
    consistent in the new grid's pixel units. Same-size calls return the
    field unchanged.
    """
    if new_h < 1 or new_w < 1:
        raise ContractViolation(f"target motion size must be positive, got {new_h}x{new_w}")
    h, w = motion.grid
    if (new_h, new_w) == (h, w):
        return motion
    ys = (np.arange(new_h, dtype=np.float64) + 0.5) * h / new_h - 0.5
    xs = (np.arange(new_w, dtype=np.float64) + 0.5) * w / new_w - 0.5
    sy, sx = np.meshgrid(ys, xs, indexing="ij")
    sampled = _bilinear_sample(motion.data, sy, sx)
    scaled = np.empty_like(sampled)
    scaled[..., 0] = sampled[..., 0] * (new_h / h)
    scaled[..., 1] = sampled[..., 1] * (new_w / w)
    return MotionField(scaled)


WEIGHT_SUM_TOL = 1e-6


def elementwise_blend(
    a: FeatureMap, b: FeatureMap, w_a: np.ndarray, w_b: np.ndarray
) -> FeatureMap:
    """Per-position convex blend ``w_a * a + w_b * b``.

    Weights are (h, w) arrays broadcast over channels and must sum to one at
    every position within ``WEIGHT_SUM_TOL``.
    """
    w_a = np.asarray(w_a, dtype=np.float64)
    w_b = np.asarray(w_b, dtype=np.float64)
    if a.grid != b.grid or a.channels != b.channels:
        raise ContractViolation(f"blend input mismatch: {a.data.shape} vs {b.data.shape}")
    if w_a.shape != a.grid or w_b.shape != a.grid:
        raise ContractViolation("blend weight grids must match the feature grid")
    if not np.all(np.isfinite(w_a)) or not np.all(np.isfinite(w_b)):
        raise ContractViolation("blend weights must be finite")
    if np.max(np.abs(w_a + w_b - 1.0)) > WEIGHT_SUM_TOL:
        raise ContractViolation("blend weights must sum to 1 at every position")
    out = w_a[..., None] * a.data + w_b[..., None] * b.data
    return FeatureMap(out)
