"""Foundational geometry: SE(3) poses, pinhole camera, DSM raster sampling.

Coordinate conventions used throughout the engine:

World frame (right-handed, local planar, meters):
  - x east, y north, z up.  ``n_z = (0, 0, 1)`` is the gravity-opposed
    vertical.  Latitude/longitude never appear; all positions are meters
    in a local frame anchored to the reference map.

Camera frame (right-handed, standard computer vision):
  - x right in the image, y down, z forward along the optical axis.
  - A nadir-looking camera therefore has its z axis parallel to world -z;
    its rotation is ``Rx(pi)`` composed with yaw.

Pose ``PoseSE3`` stores the camera-to-world transform: a world point
``P_w = R_wc @ P_c + t_wc`` where ``t_wc`` is the camera center in world
coordinates.  The 6-vector ``xi`` orders rotation first: ``xi[:3]`` is the
rotation tangent, ``xi[3:]`` the translation tangent.

Euler angles use the Z-Y-X (yaw, pitch, roll) intrinsic convention,
``R_wc = Rz(yaw) @ Ry(pitch) @ Rx(roll)``, so pitch lives in
[-pi/2, pi/2].

Image frame: origin top-left, u right, v down, pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllNoData, BehindCamera, GimbalLock, NonFinite, OutOfFootprint

_SMALL_ANGLE = 1e-8
_DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class GeoPoint:
    """A point in the local planar world frame (meters)."""

    x: float
    y: float
    z: float | None = None

    def __post_init__(self):
        vals = [self.x, self.y] + ([self.z] if self.z is not None else [])
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite(f"GeoPoint components must be finite, got {vals}")

    def as_array(self) -> np.ndarray:
        if self.z is None:
            raise ValueError("GeoPoint used in a 3D context has no elevation")
        return np.array([self.x, self.y, self.z], dtype=float)


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def _so3_exp(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        # second-order series; error O(theta^4) is far below 1e-9 here
        return np.eye(3) + wx + 0.5 * (wx @ wx)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * wx + b * (wx @ wx)


def _so3_log(rot: np.ndarray) -> np.ndarray:
    trace = float(np.trace(rot))
    cos_t = max(-1.0, min(1.0, 0.5 * (trace - 1.0)))
    theta = math.acos(cos_t)
    if theta < _SMALL_ANGLE:
        w = 0.5 * np.array(
            [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
        )
        return w * (1.0 + theta * theta / 6.0)
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from the
        # dominant diagonal entry instead
        diag = np.diag(rot)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (diag[k] + 1.0) * 0.5))
        others = [i for i in range(3) if i != k]
        for i in others:
            axis[i] = rot[k, i] / (2.0 * axis[k]) if axis[k] > 0 else 0.0
        axis /= np.linalg.norm(axis)
        # fix the sign using the antisymmetric part when it is not exactly zero
        w_as = np.array(
            [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
        )
        if float(w_as @ axis) < 0.0:
            axis = -axis
        return axis * theta
    scale = theta / (2.0 * math.sin(theta))
    return scale * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * wx + (wx @ wx) / 6.0
    b = (1.0 - math.cos(theta)) / (theta * theta)
    c = (theta - math.sin(theta)) / (theta ** 3)
    return np.eye(3) + b * wx + c * (wx @ wx)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    wx = _skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    half = 0.5 * theta
    d = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * wx + d * (wx @ wx)


@dataclass(frozen=True)
class PoseSE3:
    """Rigid camera-to-world transform with its tangent parameterization.

    ``rotation`` is orthonormal with determinant +1; ``xi`` round-trips
    through exp/log to 1e-9.  Instances are immutable.
    """

    xi: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates (alias of translation)."""
        return self.translation

    def compose_right(self, delta: np.ndarray) -> "PoseSE3":
        """Return this pose perturbed on the right: ``T * exp(delta)``."""
        d = exp_map(np.asarray(delta, dtype=float))
        rot = self.rotation @ d.rotation
        t = self.rotation @ d.translation + self.translation
        return from_rt(rot, t)


def exp_map(xi: np.ndarray) -> PoseSE3:
    """Exponential map from the 6-vector tangent (rotation-first) to a pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise NonFinite("exp_map requires finite tangent components")
    w, rho = xi[:3], xi[3:]
    rot = _so3_exp(w)
    t = _so3_left_jacobian(w) @ rho
    return PoseSE3(xi=xi.copy(), rotation=rot, translation=t)


def log_map(pose: PoseSE3) -> np.ndarray:
    """Tangent 6-vector of a pose; inverse of :func:`exp_map` for |w| < pi."""
    w = _so3_log(pose.rotation)
    rho = _so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([w, rho])


def from_rt(rotation: np.ndarray, translation: np.ndarray) -> PoseSE3:
    """Build a pose from an explicit rotation matrix and camera center."""
    rotation = np.asarray(rotation, dtype=float)
    translation = np.asarray(translation, dtype=float).reshape(3)
    w = _so3_log(rotation)
    rho = _so3_left_jacobian_inv(w) @ translation
    xi = np.concatenate([w, rho])
    return PoseSE3(xi=xi, rotation=rotation, translation=translation)


def identity_pose() -> PoseSE3:
    return PoseSE3(xi=np.zeros(6), rotation=np.eye(3), translation=np.zeros(3))


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation from intrinsic Z-Y-X Euler angles."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def extract_pitch(pose: PoseSE3) -> float:
    """Pitch angle of the Z-Y-X Euler decomposition of the pose rotation.

    Raises :class:`GimbalLock` when the decomposition degenerates at
    |pitch| ~ pi/2.
    """
    s = -float(pose.rotation[2, 0])
    s = max(-1.0, min(1.0, s))
    pitch = math.asin(s)
    if abs(abs(pitch) - math.pi / 2.0) < 1e-6:
        raise GimbalLock(f"pitch {pitch:.9f} within 1e-6 of +-pi/2")
    return pitch


def lateral_axis_tilt(pose: PoseSE3) -> float:
    """Elevation of the camera's lateral (x) axis above the horizontal plane.

    Zero for a roll-free platform; this is the angle the roll penalty in the
    pose refiner drives toward zero.  Equal to minus the Euler pitch.
    """
    s = float(pose.rotation[2, 0])
    return math.asin(max(-1.0, min(1.0, s)))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus flight-telemetry priors."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pitch_prior: float = 0.0
    yaw_prior: float = 0.0
    altitude_prior: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def fov_x(self) -> float:
        """Full horizontal field of view in radians."""
        return 2.0 * math.atan(self.width / (2.0 * self.fx))


def project(pose: PoseSE3, cam: CameraModel, point: GeoPoint) -> tuple[float, float]:
    """Pinhole projection of a world point into pixel coordinates."""
    uv = project_points(pose, cam, point.as_array()[None, :])
    return float(uv[0, 0]), float(uv[0, 1])


def project_points(pose: PoseSE3, cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """Vectorized projection of an (N, 3) world-point array to (N, 2) pixels.

    Raises :class:`BehindCamera` if any point has depth <= 1e-9.
    """
    pts = np.asarray(points, dtype=float)
    p_cam = (pts - pose.translation) @ pose.rotation  # == R^T (P - t) rowwise
    z = p_cam[:, 2]
    if np.any(z <= _DEPTH_EPS):
        raise BehindCamera(f"minimum depth {z.min():.3e} <= {_DEPTH_EPS:.0e}")
    u = cam.cx + cam.fx * p_cam[:, 0] / z
    v = cam.cy + cam.fy * p_cam[:, 1] / z
    return np.stack([u, v], axis=1)


def back_project(
    pose: PoseSE3, cam: CameraModel, u: float, v: float, depth: float
) -> GeoPoint:
    """World point on the pixel ray at the given camera-frame depth."""
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0]) * depth
    p = pose.rotation @ d_cam + pose.translation
    return GeoPoint(float(p[0]), float(p[1]), float(p[2]))


def pixel_ray(pose: PoseSE3, cam: CameraModel, u: float, v: float) -> np.ndarray:
    """World-frame direction of the ray through pixel (u, v), not normalized."""
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return pose.rotation @ d_cam


@dataclass
class DsmRaster:
    """Elevation grid in meters.

    ``data[r, c]`` samples the surface at world coordinates
    ``(origin_x + (c + 0.5) * cell_size, origin_y + (r + 0.5) * cell_size)``;
    rows therefore increase northwards from the south-west origin.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    data: np.ndarray = field(repr=False)
    nodata: float = -9999.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError("data must be a rows x cols grid")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) footprint in meters."""
        return (
            self.origin_x,
            self.origin_y,
            self.origin_x + self.cols * self.cell_size,
            self.origin_y + self.rows * self.cell_size,
        )


def sample_dsm(dsm: DsmRaster, x: float, y: float) -> float:
    """Bilinear elevation at (x, y); nodata neighbors drop out of the blend.

    Weights of the surviving cells renormalize, so a single valid neighbor
    degrades to nearest-neighbor.  Raises :class:`OutOfFootprint` outside the
    raster and :class:`AllNoData` when all four neighbors are nodata.
    """
    out = sample_dsm_many(dsm, np.array([[x, y]]))
    if math.isnan(out[0]):
        raise AllNoData(f"all neighbors nodata at ({x:.3f}, {y:.3f})")
    return float(out[0])


def sample_dsm_many(dsm: DsmRaster, xy: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling; all-nodata sites come back as NaN."""
    xy = np.asarray(xy, dtype=float)
    x_min, y_min, x_max, y_max = dsm.extent
    x, y = xy[:, 0], xy[:, 1]
    if np.any((x < x_min) | (x > x_max) | (y < y_min) | (y > y_max)):
        bad = np.argmax((x < x_min) | (x > x_max) | (y < y_min) | (y > y_max))
        raise OutOfFootprint(
            f"({x[bad]:.3f}, {y[bad]:.3f}) outside footprint "
            f"[{x_min}, {x_max}] x [{y_min}, {y_max}]"
        )
    # fractional cell-center coordinates, clamped so border queries use
    # edge extension
    fc = np.clip((x - dsm.origin_x) / dsm.cell_size - 0.5, 0.0, dsm.cols - 1.0)
    fr = np.clip((y - dsm.origin_y) / dsm.cell_size - 0.5, 0.0, dsm.rows - 1.0)
    c0 = np.clip(np.floor(fc).astype(int), 0, dsm.cols - 1)
    r0 = np.clip(np.floor(fr).astype(int), 0, dsm.rows - 1)
    c1 = np.minimum(c0 + 1, dsm.cols - 1)
    r1 = np.minimum(r0 + 1, dsm.rows - 1)
    tx = fc - c0
    ty = fr - r0

    vals = np.stack(
        [dsm.data[r0, c0], dsm.data[r0, c1], dsm.data[r1, c0], dsm.data[r1, c1]],
        axis=1,
    ).astype(float)
    weights = np.stack(
        [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1
    )
    valid = vals != dsm.nodata
    weights = np.where(valid, weights, 0.0)
    wsum = weights.sum(axis=1)
    out = np.full(len(xy), np.nan)
    ok = wsum > 1e-12
    out[ok] = (weights[ok] * vals[ok]).sum(axis=1) / wsum[ok]
    return out
