"""Inverse perspective mapping of image pixels onto the ground plane.

Conventions
-----------
* Pixels are ``(u, v) = (column, row)`` with the origin at the top-left corner.
* Camera frame: x right, y down, z along the optical axis.
* Vehicle frame: x forward, y left, z up.
* :class:`Pose` maps camera coordinates to global coordinates,
  ``X_global = R @ X_cam + t``; ``t`` is the camera center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, HorizonError
from .geometry import BevCoord, PathCoord, PathSpline, to_path_coords

HORIZON_EPS = 1e-9

# camera axes expressed in the vehicle frame (columns)
R_CAM_TO_VEHICLE = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)

# ipm_project_batch status codes
OK = 0
HORIZON = 1
BEHIND = 2
OUT_OF_IMAGE = 3


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X Euler rotation; positive pitch tilts the vehicle x axis downward."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


@dataclass(frozen=True)
class CameraIntrinsics:
    K: np.ndarray
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        if K.shape != (3, 3):
            raise ValueError("K must be 3x3")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("K must be invertible")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))

    @classmethod
    def from_focal(cls, fx, fy, cx, cy, width=None, height=None) -> "CameraIntrinsics":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, width, height)

    @property
    def K_inv(self) -> np.ndarray:
        return self._K_inv

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        ok = np.all(np.isfinite(pixels), axis=1)
        if self.width is not None:
            ok &= (pixels[:, 0] >= 0) & (pixels[:, 0] <= self.width)
        if self.height is not None:
            ok &= (pixels[:, 1] >= 0) & (pixels[:, 1] <= self.height)
        return ok


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return self.translation


@dataclass(frozen=True)
class GroundPlane:
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("plane normal must be a unit vector")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))

    @classmethod
    def horizontal(cls, z: float = 0.0) -> "GroundPlane":
        return cls(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, z]))


def ipm_project_batch(cam: CameraIntrinsics, pose: Pose, pixels, plane: GroundPlane | None = None):
    """Vectorized ray-plane intersection.

    Returns ``(points3d, status)`` with NaN rows where status is nonzero.
    """
    plane = plane or GroundPlane.horizontal()
    pix = np.atleast_2d(np.asarray(pixels, dtype=float))
    hom = np.column_stack([pix, np.ones(len(pix))])
    rays = hom @ cam.K_inv.T @ pose.rotation.T
    denom = rays @ plane.normal
    status = np.zeros(len(pix), dtype=int)
    status[~cam.in_bounds(pix)] = OUT_OF_IMAGE
    flat = (np.abs(denom) < HORIZON_EPS) & (status == OK)
    status[flat] = HORIZON
    safe = np.where(np.abs(denom) < HORIZON_EPS, 1.0, denom)
    lam = plane.normal @ (plane.point - pose.center) / safe
    status[(status == OK) & (lam <= 0)] = BEHIND
    pts = pose.center + lam[:, None] * rays
    pts[status != OK] = np.nan
    return pts, status


def ipm_project_3d(cam: CameraIntrinsics, pose: Pose, pixel, plane: GroundPlane | None = None) -> np.ndarray:
    pts, status = ipm_project_batch(cam, pose, np.asarray(pixel, dtype=float)[None, :], plane)
    code = int(status[0])
    if code == OUT_OF_IMAGE:
        raise ValueError(f"pixel {tuple(pixel)} outside image bounds")
    if code == HORIZON:
        raise HorizonError(f"pixel {tuple(pixel)} ray is parallel to the ground plane")
    if code == BEHIND:
        raise BehindCameraError(f"pixel {tuple(pixel)} ray meets the plane behind the camera")
    return pts[0]


def ipm_project(cam: CameraIntrinsics, pose: Pose, pixel, plane: GroundPlane | None = None) -> BevCoord:
    """Project one pixel onto the ground plane and return its BEV coordinates."""
    x = ipm_project_3d(cam, pose, pixel, plane)
    return BevCoord(float(x[0]), float(x[1]))


def project_to_image(cam: CameraIntrinsics, pose: Pose, points3d) -> np.ndarray:
    """Forward pinhole projection; NaN for points at or behind the camera plane."""
    X = np.atleast_2d(np.asarray(points3d, dtype=float))
    cam_pts = (X - pose.center) @ pose.rotation
    uvw = cam_pts @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = uvw[:, :2] / uvw[:, 2:3]
    uv[cam_pts[:, 2] <= 0] = np.nan
    return uv


def pixel_to_path(
    cam: CameraIntrinsics,
    pose: Pose,
    pixel,
    plane: GroundPlane | None,
    spline: PathSpline,
    e_max: float | None = None,
) -> PathCoord:
    return to_path_coords(spline, ipm_project(cam, pose, pixel, plane), e_max=e_max)


@dataclass(frozen=True)
class CameraRig:
    """Camera intrinsics plus its mounting on the vehicle.

    ``mount`` is the camera center in the vehicle frame (meters, z up from
    the ground plane); angles are radians.
    """

    intrinsics: CameraIntrinsics
    mount: tuple[float, float, float] = (0.0, 0.0, 1.5)
    roll: float = 0.0
    pitch: float = np.deg2rad(10.0)
    yaw: float = 0.0
    plane_z: float = 0.0

    @property
    def plane(self) -> GroundPlane:
        return GroundPlane.horizontal(self.plane_z)

    def pose(self, x: float, y: float, heading: float) -> Pose:
        Rz = rot_z(heading)
        R = Rz @ rpy_matrix(self.roll, self.pitch, self.yaw) @ R_CAM_TO_VEHICLE
        t = np.array([x, y, self.plane_z]) + Rz @ np.asarray(self.mount, dtype=float)
        return Pose(R, t)

    @classmethod
    def from_config(cls, block: dict) -> "CameraRig":
        cam = CameraIntrinsics.from_focal(
            block["fx"], block["fy"], block["cx"], block["cy"], block.get("width"), block.get("height")
        )
        return cls(
            intrinsics=cam,
            mount=(float(block["x"]), float(block["y"]), float(block["z"])),
            roll=np.deg2rad(block["roll"]),
            pitch=np.deg2rad(block["pitch"]),
            yaw=np.deg2rad(block["yaw"]),
            plane_z=float(block["plane_z"]),
        )
