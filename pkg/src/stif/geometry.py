"""Boxes, corners, pinhole projection and ego/world frame changes.

Conventions (z-up, nuScenes-like):

* Box3D lives in a z-up frame (ego or world). ``l`` runs along the heading,
  ``w`` across it, ``h`` vertically. ``yaw`` is the heading about +z,
  normalized to (-pi, pi].
* Extents are full extents, never half extents.
* 3D corner order is fixed so that corner ``k`` of a box at time t and corner
  ``k`` of the same box at another time correspond::

      k : (dx, dy, dz) signs in the box frame
      0 : (+, +, +)    4 : (+, +, -)
      1 : (+, -, +)    5 : (+, -, -)
      2 : (-, -, +)    6 : (-, -, -)
      3 : (-, +, +)    7 : (-, +, -)

* 2D corner order is (-,-), (-,+), (+,+), (+,-) around the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "BehindCameraError",
    "Box2D",
    "Box3D",
    "CameraModel",
    "EgoPose",
    "normalize_angle",
    "corners2d",
    "corners3d",
    "project",
    "unproject",
    "to_world",
    "to_ego",
    "bev_center_distance",
    "CORNER_SIGNS_3D",
]


class GeometryError(ValueError):
    """Invalid geometric argument (non-finite value, bad extent, ...)."""


class BehindCameraError(GeometryError):
    pass


CORNER_SIGNS_3D = np.array(
    [
        [1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [-1, 1, 1],
        [1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, 1, -1],
    ],
    dtype=np.float64,
)

_CORNER_SIGNS_2D = np.array([[-1, -1], [-1, 1], [1, 1], [1, -1]], dtype=np.float64)


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise GeometryError(f"{name}: non-finite value {v!r}")


@dataclass(frozen=True)
class Box2D:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        _check_finite("Box2D", self.cx, self.cy, self.w, self.h)
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"Box2D extents must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self) -> None:
        _check_finite("Box3D", self.x, self.y, self.z, self.l, self.w, self.h, self.yaw)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise GeometryError(
                f"Box3D extents must be positive, got l={self.l}, w={self.w}, h={self.h}"
            )
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def as_array(self) -> np.ndarray:
        """[x, y, z, l, w, h, yaw]"""
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box3D":
        a = [float(v) for v in a]
        if len(a) != 7:
            raise GeometryError(f"Box3D needs 7 values, got {len(a)}")
        return cls(*a)

    def translated(self, t) -> "Box3D":
        return Box3D(self.x + float(t[0]), self.y + float(t[1]), self.z + float(t[2]),
                     self.l, self.w, self.h, self.yaw)


@dataclass(frozen=True)
class CameraModel:
    fx: float = 1000.0
    fy: float = 1000.0
    cx0: float = 800.0
    cy0: float = 450.0
    image_w: int = 1600
    image_h: int = 900

    def __post_init__(self) -> None:
        _check_finite("CameraModel", self.fx, self.fy, self.cx0, self.cy0)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx0 <= self.image_w and 0 <= self.cy0 <= self.image_h):
            raise GeometryError("principal point must lie inside the image")


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EgoPose:
    """Rigid transform ego -> world: p_world = rotation @ p_ego + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise GeometryError("EgoPose needs a finite 3x3 rotation and 3-vector translation")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("EgoPose rotation is not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "EgoPose":
        return cls(_rot_z(yaw), np.array([x, y, z], dtype=np.float64))

    @property
    def heading(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def inverse(self) -> "EgoPose":
        rt = self.rotation.T
        return EgoPose(rt, -rt @ self.translation)


def corners2d(b: Box2D) -> np.ndarray:
    """4x2 pixel corners of an axis-aligned 2D box."""
    _check_finite("corners2d", b.cx, b.cy, b.w, b.h)
    if b.w <= 0 or b.h <= 0:
        raise GeometryError("corners2d: non-positive extent")
    half = np.array([b.w / 2.0, b.h / 2.0])
    return np.array([b.cx, b.cy]) + _CORNER_SIGNS_2D * half


def corners3d(b: Box3D) -> np.ndarray:
    """8x3 corners ``center + R_z(yaw) @ offset`` in the documented order."""
    _check_finite("corners3d", b.x, b.y, b.z, b.l, b.w, b.h, b.yaw)
    offsets = CORNER_SIGNS_3D * (np.array([b.l, b.w, b.h]) / 2.0)
    return offsets @ _rot_z(b.yaw).T + b.center


def project(cam: CameraModel, p) -> np.ndarray:
    """Pinhole projection of a camera-frame point (x right, y down, z forward)."""
    x, y, z = (float(v) for v in p)
    _check_finite("project", x, y, z)
    if z <= 1e-6:
        raise BehindCameraError(f"point is behind the camera (z={z})")
    return np.array([cam.fx * x / z + cam.cx0, cam.fy * y / z + cam.cy0])


def unproject(cam: CameraModel, uv, depth: float) -> np.ndarray:
    u, v = (float(a) for a in uv)
    return np.array([(u - cam.cx0) * depth / cam.fx, (v - cam.cy0) * depth / cam.fy, depth])


def to_world(pose: EgoPose, b: Box3D) -> Box3D:
    c = pose.rotation @ b.center + pose.translation
    return Box3D(c[0], c[1], c[2], b.l, b.w, b.h, b.yaw + pose.heading)


def to_ego(pose: EgoPose, b: Box3D) -> Box3D:
    return to_world(pose.inverse(), b)


def bev_center_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)
