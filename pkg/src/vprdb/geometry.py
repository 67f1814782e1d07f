"""Camera geometry: pinhole back-projection, rigid poses and voxelization.

Poses are camera-to-world throughout (``p_world = R @ p_cam + t``).
Quaternions are stored scalar-first as ``(w, x, y, z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, InputError, InvalidDepthError, ShapeError

__all__ = [
    "CameraIntrinsics",
    "PoseSE3",
    "DepthImage",
    "backproject_pixel",
    "project_points",
    "frame_to_world_points",
    "voxelize",
    "voxel_centers",
    "synthesize_depth_from_map",
]

DEFAULT_STRIDE = 4
DEFAULT_MAX_DEPTH = 10.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if not self.depth_scale > 0:
            raise ConfigError(f"depth_scale must be positive, got {self.depth_scale}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid camera-to-world transform.

    Parameters
    ----------
    rotation : tuple of float
        Unit quaternion ``(w, x, y, z)``.
    translation : tuple of float
        Camera center in world coordinates (meters).
    """

    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        q = tuple(float(c) for c in self.rotation)
        t = tuple(float(c) for c in self.translation)
        if len(q) != 4 or len(t) != 3:
            raise ConfigError("pose needs a 4-component quaternion and a 3-vector")
        if not all(math.isfinite(c) for c in q + t):
            raise ConfigError(f"non-finite pose component in {q} {t}")
        if abs(math.sqrt(sum(c * c for c in q)) - 1.0) > 1e-9:
            raise ConfigError(f"rotation quaternion is not unit length: {q}")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        w, x, y, z = q
        rot = Rotation.from_quat([x, y, z, w]).as_matrix()
        rot.setflags(write=False)
        object.__setattr__(self, "_matrix", rot)

    @classmethod
    def from_quaternion(cls, qw, qx, qy, qz, tx=0.0, ty=0.0, tz=0.0) -> "PoseSE3":
        """Build a pose from a possibly non-normalized quaternion."""
        q = np.array([qw, qx, qy, qz], dtype=np.float64)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm < 1e-12:
            raise ConfigError(f"degenerate quaternion {q.tolist()}")
        q = q / norm
        return cls(tuple(q.tolist()), (tx, ty, tz))

    @classmethod
    def from_matrix(cls, transform: np.ndarray) -> "PoseSE3":
        transform = np.asarray(transform, dtype=np.float64)
        if transform.shape not in ((4, 4), (3, 4)):
            raise ShapeError(f"expected a 3x4 or 4x4 transform, got {transform.shape}")
        x, y, z, w = Rotation.from_matrix(transform[:3, :3]).as_quat()
        return cls.from_quaternion(w, x, y, z, *transform[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return self._matrix

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self._matrix
        out[:3, 3] = self.translation
        return out

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points to the world frame."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self._matrix.T + np.asarray(self.translation)

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points to the camera frame."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (points - np.asarray(self.translation)) @ self._matrix


@dataclass(frozen=True)
class DepthImage:
    """Raw depth raster, row-major, ``0`` marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"depth image must be 2-D, got shape {values.shape}")
        if np.issubdtype(values.dtype, np.floating):
            if not np.all(np.isfinite(values)):
                raise InputError("depth image contains non-finite values")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def meters(self, depth_scale: float) -> np.ndarray:
        return self.values.astype(np.float64) * depth_scale

    def valid_mask(self) -> np.ndarray:
        return self.values > 0


def backproject_pixel(u: float, v: float, z: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``(u, v)`` at metric depth ``z`` to a camera-frame point."""
    if not z > 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ShapeError(f"pixel ({u}, {v}) outside {intrinsics.width}x{intrinsics.height} image")
    return np.array(
        [(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z]
    )


def project_points(points_cam: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to continuous pixel coordinates."""
    points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    z = points_cam[:, 2]
    u = intrinsics.fx * points_cam[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * points_cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=1)


def frame_to_world_points(
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    pose: PoseSE3,
    stride: int = DEFAULT_STRIDE,
    max_depth: float = DEFAULT_MAX_DEPTH,
) -> np.ndarray:
    """Back-project every ``stride``-th valid depth pixel into the world frame.

    Returns an ``(n, 3)`` float array. Pixels with zero depth or metric
    depth beyond ``max_depth`` are skipped.
    """
    if depth.values.shape != intrinsics.shape:
        raise ShapeError(
            f"depth image {depth.width}x{depth.height} does not match intrinsics "
            f"{intrinsics.width}x{intrinsics.height}"
        )
    if int(stride) != stride or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride}")
    if not max_depth > 0:
        raise ConfigError(f"max_depth must be positive, got {max_depth}")
    stride = int(stride)
    raw = depth.values[::stride, ::stride]
    rows, cols = np.nonzero(raw > 0)
    z = raw[rows, cols].astype(np.float64) * intrinsics.depth_scale
    keep = (z > 0) & (z <= max_depth)
    rows, cols, z = rows[keep], cols[keep], z[keep]
    u = cols.astype(np.float64) * stride
    v = rows.astype(np.float64) * stride
    cam = np.stack(
        [(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z],
        axis=1,
    )
    return pose.transform(cam)


def voxelize(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Deduplicated integer voxel keys ``floor(p / voxel_size)``.

    Returns an ``(k, 3)`` int64 array with rows in lexicographic order.
    """
    if not voxel_size > 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.empty((0, 3), dtype=np.int64)
    keys = np.floor(points / voxel_size).astype(np.int64)
    return np.unique(keys, axis=0)


def voxel_centers(keys: np.ndarray, voxel_size: float) -> np.ndarray:
    return (np.asarray(keys, dtype=np.float64).reshape(-1, 3) + 0.5) * voxel_size


def synthesize_depth_from_map(
    map_voxels: np.ndarray,
    voxel_size: float,
    pose: PoseSE3,
    intrinsics: CameraIntrinsics,
    existing: Optional[DepthImage] = None,
) -> DepthImage:
    """Render a depth image of the voxel map from ``pose``.

    Each voxel center is splatted as a square of half-width
    ``ceil(fx * voxel_size / (2 z))`` pixels and z-buffered (nearest
    wins). Pixels already valid in ``existing`` keep their value.
    """
    map_voxels = np.asarray(map_voxels).reshape(-1, 3)
    if len(map_voxels) == 0:
        raise InputError("cannot synthesize depth from an empty map")
    if not voxel_size > 0:
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    if existing is not None and existing.values.shape != intrinsics.shape:
        raise ShapeError("existing depth does not match intrinsics")

    h, w = intrinsics.shape
    cam = pose.inverse_transform(voxel_centers(map_voxels, voxel_size))
    cam = cam[cam[:, 2] > 1e-6]
    zbuf = np.full((h, w), np.inf)
    if len(cam):
        z = cam[:, 2]
        uv = project_points(cam, intrinsics)
        pu = np.floor(uv[:, 0] + 0.5).astype(np.int64)
        pv = np.floor(uv[:, 1] + 0.5).astype(np.int64)
        radius = np.ceil(intrinsics.fx * voxel_size / (2.0 * z)).astype(np.int64)
        radius = np.minimum(radius, max(h, w))
        visible = (pu + radius >= 0) & (pu - radius < w) & (pv + radius >= 0) & (pv - radius < h)
        pu, pv, z, radius = pu[visible], pv[visible], z[visible], radius[visible]
        _splat(zbuf, pu, pv, z, radius)

    rendered = np.zeros((h, w), dtype=np.uint16)
    hit = np.isfinite(zbuf)
    raw = np.rint(zbuf[hit] / intrinsics.depth_scale)
    rendered[hit] = np.clip(raw, 1, np.iinfo(np.uint16).max).astype(np.uint16)
    if existing is not None:
        keep = existing.values > 0
        rendered[keep] = existing.values[keep]
    return DepthImage(rendered)


def _splat(zbuf: np.ndarray, pu, pv, z, radius) -> None:
    h, w = zbuf.shape
    for r in np.unique(radius):
        sel = radius == r
        count = int(sel.sum())
        su, sv, sz = pu[sel], pv[sel], z[sel]
        if (2 * r + 1) ** 2 <= count:
            for dv in range(-r, r + 1):
                for du in range(-r, r + 1):
                    tu, tv = su + du, sv + dv
                    ok = (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
                    np.minimum.at(zbuf, (tv[ok], tu[ok]), sz[ok])
        else:
            for u0, v0, zz in zip(su.tolist(), sv.tolist(), sz.tolist()):
                block = zbuf[max(v0 - r, 0) : v0 + r + 1, max(u0 - r, 0) : u0 + r + 1]
                np.minimum(block, zz, out=block)
