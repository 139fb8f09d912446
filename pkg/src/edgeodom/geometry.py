"""SE(3) poses, pinhole camera model, and warp/Jacobian machinery.

Conventions:
    - Twist vectors are 6-dim, ordered (translation, rotation): xi = [v, w],
      v in meters, w in radians.
    - Pose updates are left-multiplicative: T <- exp(dxi) @ T.
    - A Pose maps points from its source frame to its target frame via
      X' = R @ X + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' rotation formula with small-angle series fallback."""
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(theta) / theta
    B = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + A * W + B * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of an orthonormal matrix; valid for angles < pi."""
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part degenerates; recover axis from R + I.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        k = int(np.argmax(axis))
        axis = M[:, k] / max(axis[k], _EPS)
        axis = axis / np.linalg.norm(axis)
        # Fix sign using the antisymmetric part.
        w_raw = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, w_raw) < 0:
            axis = -axis
        return theta * axis
    factor = theta / (2.0 * np.sin(theta))
    return factor * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    A = (1.0 - np.cos(theta)) / theta**2
    B = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + A * W + B * (W @ W)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = theta / 2.0
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * W + (1.0 - cot) / theta**2 * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid-body transform on SE(3): X' = R @ X + t."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose":
        """Exponential map of a twist (translation, rotation)."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        v, w = xi[:3], xi[3:]
        R = so3_exp(w)
        t = _so3_left_jacobian(w) @ v
        return Pose(R, t)

    def log(self) -> np.ndarray:
        """Twist such that exp(log(T)) = T, for rotation angles < pi."""
        w = so3_log(self.R)
        v = _so3_left_jacobian_inv(w) @ self.t
        return np.concatenate([v, w])

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 3) points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def renormalized(self) -> "Pose":
        """Project the rotation back onto SO(3) via SVD."""
        U, _, Vt = np.linalg.svd(self.R)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return Pose(R, self.t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.R, other.R, atol=tol)
            and np.allclose(self.t, other.t, atol=tol)
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def at_level(self, level: int) -> "CameraIntrinsics":
        """Intrinsics for pyramid level `level` (half resolution per level).

        Coordinate mapping between levels uses pixel-center alignment:
        x_fine = 2 * x_coarse + 0.5.
        """
        s = 0.5**level
        cx, cy = self.cx, self.cy
        for _ in range(level):
            cx = (cx - 0.5) / 2.0
            cy = (cy - 0.5) / 2.0
        w, h = self.width, self.height
        for _ in range(level):
            w = (w + 1) // 2
            h = (h + 1) // 2
        return CameraIntrinsics(self.fx * s, self.fy * s, cx, cy, w, h)


def full_to_level(pts: np.ndarray, level: int) -> np.ndarray:
    """Map full-resolution pixel coordinates to pyramid level coordinates."""
    pts = np.asarray(pts, dtype=float)
    for _ in range(level):
        pts = (pts - 0.5) / 2.0
    return pts


def level_to_full(pts: np.ndarray, level: int) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    for _ in range(level):
        pts = 2.0 * pts + 0.5
    return pts


def project(points: np.ndarray, intr: CameraIntrinsics):
    """Pinhole projection of (..., 3) camera-frame points.

    Returns (pixels, valid) where valid flags positive-depth points; pixels of
    rejected points are NaN.
    """
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * points[..., 0] / z + intr.cx
        v = intr.fy * points[..., 1] / z + intr.cy
    pix = np.stack([u, v], axis=-1)
    pix[~valid] = np.nan
    return pix, valid


def backproject(pixels: np.ndarray, inv_depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Lift (..., 2) pixels with inverse depth to camera-frame 3D points."""
    pixels = np.asarray(pixels, dtype=float)
    inv_depth = np.asarray(inv_depth, dtype=float)
    if np.any(inv_depth <= 0):
        raise ValueError("inverse depth must be positive")
    z = 1.0 / inv_depth
    x = (pixels[..., 0] - intr.cx) / intr.fx * z
    y = (pixels[..., 1] - intr.cy) / intr.fy * z
    return np.stack([x, y, z], axis=-1)


def in_bounds(pixels: np.ndarray, intr: CameraIntrinsics, margin: float = 1.0) -> np.ndarray:
    """Strictly-inside test with a border margin (pixels)."""
    u, v = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        ok = (
            (u > margin)
            & (u < intr.width - 1 - margin)
            & (v > margin)
            & (v < intr.height - 1 - margin)
        )
    return ok & np.isfinite(u) & np.isfinite(v)


def warp(
    pixels: np.ndarray,
    inv_depth: np.ndarray,
    pose: Pose,
    intr_src: CameraIntrinsics,
    intr_dst: CameraIntrinsics | None = None,
):
    """Re-project source pixels into the target frame.

    Returns (pixels_dst, valid); valid requires positive depth in the target
    frame and the projection inside the target image with a 1-pixel margin.
    """
    if intr_dst is None:
        intr_dst = intr_src
    pts = backproject(pixels, inv_depth, intr_src)
    pts = pose.apply(pts)
    pix, valid = project(pts, intr_dst)
    valid = valid & in_bounds(pix, intr_dst)
    return pix, valid


def warp_points(pixels, inv_depth, pose, intr_src):
    """Backproject-and-transform without projection; returns (..., 3) points."""
    return pose.apply(backproject(pixels, inv_depth, intr_src))


def warp_jacobian(
    pixels: np.ndarray,
    inv_depth: np.ndarray,
    pose: Pose,
    intr_src: CameraIntrinsics,
    intr_dst: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Jacobian of the warped pixel w.r.t. a left-multiplicative twist.

    Returns (..., 2, 6) with columns ordered (tx, ty, tz, wx, wy, wz).
    """
    if intr_dst is None:
        intr_dst = intr_src
    X = warp_points(pixels, inv_depth, pose, intr_src)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    fx, fy = intr_dst.fx, intr_dst.fy
    shape = X.shape[:-1]
    J = np.empty(shape + (2, 6))
    # d(pix)/dX projection Jacobian composed with dX/d(twist) = [I | -hat(X)].
    J[..., 0, 0] = fx * inv_z
    J[..., 0, 1] = 0.0
    J[..., 0, 2] = -fx * x * inv_z2
    J[..., 1, 0] = 0.0
    J[..., 1, 1] = fy * inv_z
    J[..., 1, 2] = -fy * y * inv_z2
    # Rotation columns: J_proj @ (-hat(X)).
    J[..., 0, 3] = -fx * x * y * inv_z2
    J[..., 0, 4] = fx * (1.0 + x * x * inv_z2)
    J[..., 0, 5] = -fx * y * inv_z
    J[..., 1, 3] = -fy * (1.0 + y * y * inv_z2)
    J[..., 1, 4] = fy * x * y * inv_z2
    J[..., 1, 5] = fy * x * inv_z
    return J


def point_jacobian_wrt_twist(X: np.ndarray) -> np.ndarray:
    """d(exp(dxi) @ X)/d(dxi) at dxi = 0, shape (..., 3, 6)."""
    X = np.asarray(X, dtype=float)
    shape = X.shape[:-1]
    J = np.zeros(shape + (3, 6))
    J[..., 0, 0] = 1.0
    J[..., 1, 1] = 1.0
    J[..., 2, 2] = 1.0
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    J[..., 0, 4] = z
    J[..., 0, 5] = -y
    J[..., 1, 3] = -z
    J[..., 1, 5] = x
    J[..., 2, 3] = y
    J[..., 2, 4] = -x
    return J


def projection_jacobian(X: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """d(project(X))/dX, shape (..., 2, 3)."""
    X = np.asarray(X, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    J = np.zeros(X.shape[:-1] + (2, 3))
    J[..., 0, 0] = intr.fx * inv_z
    J[..., 0, 2] = -intr.fx * x * inv_z2
    J[..., 1, 1] = intr.fy * inv_z
    J[..., 1, 2] = -intr.fy * y * inv_z2
    return J
