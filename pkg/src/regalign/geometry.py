"""Rigid-body poses, pinhole projection, and warp derivatives.

Conventions used throughout the package:
  * a pose maps reference-view (camera 1) points into target-view (camera 2)
    coordinates: X2 = R @ X1 + t
  * twists are ordered (omega, nu): rotation first, translation second
  * pose updates compose on the left: T <- exp(delta) o T
  * pixel coordinates are (u, v) = (column, row), origin at the top-left
    pixel center
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotationError, DimensionError

# Depth of a transformed point must exceed this to count as in front of the
# camera.  Points at or below it are flagged invalid, never clamped.
EPSILON_Z = 1e-6

# Rotation angle below which closed-form Rodrigues coefficients are replaced
# by their Taylor series.  Well above the 1e-8 floor where the closed forms
# lose all precision.
_TAYLOR_ANGLE = 1e-4

# Composes tolerated before the rotation block is re-orthonormalized.
_ORTHO_INTERVAL = 100

_ORTHO_TOL = 1e-9


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def _rot_coeffs(theta_sq: float) -> tuple[float, float, float]:
    """Rodrigues coefficients (sin t/t, (1-cos t)/t^2, (t-sin t)/t^3)."""
    if theta_sq < _TAYLOR_ANGLE * _TAYLOR_ANGLE:
        s = theta_sq
        a = 1.0 - s / 6.0 + s * s / 120.0
        b = 0.5 - s / 24.0 + s * s / 720.0
        c = 1.0 / 6.0 - s / 120.0 + s * s / 5040.0
        return a, b, c
    theta = math.sqrt(theta_sq)
    a = math.sin(theta) / theta
    # 2 sin^2(t/2) avoids the 1 - cos cancellation at small angles.
    half = math.sin(0.5 * theta)
    b = 2.0 * half * half / theta_sq
    c = (theta - math.sin(theta)) / (theta_sq * theta)
    return a, b, c


@dataclass(frozen=True)
class Twist:
    """se(3) tangent vector, ordered (omega, nu)."""

    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=np.float64).reshape(3))

    @staticmethod
    def from_array(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != 6:
            raise DimensionError(f"twist needs 6 components, got {v.shape[0]}")
        return Twist(v[:3], v[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])

    def to_json(self) -> list[float]:
        return [float(x) for x in self.as_array()]

    @staticmethod
    def from_json(data: list[float]) -> "Twist":
        return Twist.from_array(np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform with an explicit 3x3 rotation block."""

    rotation: np.ndarray
    translation: np.ndarray
    # Compose-chain depth; rotations are re-orthonormalized when it wraps.
    compose_count: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.linalg.norm(r.T @ r - np.eye(3))
        if not np.isfinite(err) or err > _ORTHO_TOL:
            raise DimensionError(f"rotation block not orthonormal (|R'R - I| = {err:.3e})")
        if np.linalg.det(r) < 0.0:
            raise DimensionError("rotation block has negative determinant")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise DimensionError(f"pose matrix must be 4x4, got {m.shape}")
        return SE3Pose(m[:3, :3], m[:3, 3])

    def to_json(self) -> list[float]:
        """Row-major 4x4 matrix flattened to 16 numbers."""
        return [float(x) for x in self.matrix().reshape(-1)]

    @staticmethod
    def from_json(data: list[float]) -> "SE3Pose":
        v = np.asarray(data, dtype=np.float64).reshape(-1)
        if v.shape[0] != 16:
            raise DimensionError(f"pose JSON needs 16 numbers, got {v.shape[0]}")
        return SE3Pose.from_matrix(v.reshape(4, 4))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise DimensionError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise DimensionError("principal point must lie inside the image")

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics of the same camera at half resolution."""
        return CameraIntrinsics(
            self.fx / 2.0,
            self.fy / 2.0,
            self.cx / 2.0,
            self.cy / 2.0,
            self.width // 2,
            self.height // 2,
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(data: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            float(data["fx"]),
            float(data["fy"]),
            float(data["cx"]),
            float(data["cy"]),
            int(data["width"]),
            int(data["height"]),
        )


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float


@dataclass(frozen=True)
class WarpResult:
    u: float
    v: float
    depth: float
    valid: bool


def se3_exp(twist: Twist) -> SE3Pose:
    """Exponential map: Rodrigues rotation plus the V-matrix translation."""
    w = twist.omega
    theta_sq = float(w @ w)
    a, b, c = _rot_coeffs(theta_sq)
    wx = _skew(w)
    wx2 = wx @ wx
    rot = np.eye(3) + a * wx + b * wx2
    vmat = np.eye(3) + b * wx + c * wx2
    return SE3Pose(rot, vmat @ twist.nu)


def se3_log(pose: SE3Pose) -> Twist:
    """Inverse of se3_exp.

    Raises DegenerateRotationError at rotation angle pi, where the axis sign
    cannot be recovered.
    """
    r = pose.rotation
    cos_theta = float(np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0))
    theta = math.acos(cos_theta)
    if theta < 1e-3:
        # theta/(2 sin theta) expanded; exact enough to f64 here.
        f = 0.5 + theta * theta / 12.0
        w = f * _vee(r - r.T)
    elif theta > math.pi - 1e-4:
        sin_theta = math.sin(theta)
        if sin_theta < 1e-12:
            raise DegenerateRotationError("rotation angle at pi; axis sign undetermined")
        # Axis magnitudes from the symmetric part, signs from the skew part.
        outer = ((r + r.T) * 0.5 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        axis = np.sqrt(np.clip(np.diag(outer), 0.0, None))
        sign_src = _vee(r - r.T)
        axis *= np.where(np.signbit(sign_src), -1.0, 1.0)
        axis /= np.linalg.norm(axis)
        w = theta * axis
    else:
        w = theta / (2.0 * math.sin(theta)) * _vee(r - r.T)

    theta_sq = float(w @ w)
    a, b, _ = _rot_coeffs(theta_sq)
    if theta_sq < _TAYLOR_ANGLE * _TAYLOR_ANGLE:
        k = 1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    else:
        k = (1.0 - a / (2.0 * b)) / theta_sq
    wx = _skew(w)
    vinv = np.eye(3) - 0.5 * wx + k * (wx @ wx)
    return Twist(w, vinv @ pose.translation)


def _orthonormalized(r: np.ndarray) -> np.ndarray:
    # Modified Gram-Schmidt on columns.
    q = r.copy()
    for j in range(3):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        q[:, j] /= np.linalg.norm(q[:, j])
    return q


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Pose product a o b (apply b first, then a)."""
    rot = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    count = max(a.compose_count, b.compose_count) + 1
    if count >= _ORTHO_INTERVAL:
        rot = _orthonormalized(rot)
        count = 0
    return SE3Pose(rot, t, compose_count=count)


def inverse(pose: SE3Pose) -> SE3Pose:
    rt = pose.rotation.T
    return SE3Pose(rt, -rt @ pose.translation, compose_count=pose.compose_count)


def backproject(x: PixelCoord, depth: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel plus depth to a 3D point in the camera frame."""
    return depth * np.array(
        [(x.u - intrinsics.cx) / intrinsics.fx, (x.v - intrinsics.cy) / intrinsics.fy, 1.0]
    )


def warp(x: PixelCoord, depth: float, pose: SE3Pose, intrinsics: CameraIntrinsics) -> WarpResult:
    """Back-project, transform, and re-project one pixel.

    Returns the warped coordinate, the transformed point's depth, and a
    validity flag that is False behind the camera (z' <= EPSILON_Z).
    """
    p2 = pose.rotation @ backproject(x, depth, intrinsics) + pose.translation
    z = float(p2[2])
    if z <= EPSILON_Z:
        return WarpResult(math.nan, math.nan, z, False)
    u = intrinsics.fx * p2[0] / z + intrinsics.cx
    v = intrinsics.fy * p2[1] / z + intrinsics.cy
    return WarpResult(float(u), float(v), z, True)


def warp_many(
    uv: np.ndarray,
    depths: np.ndarray,
    pose: SE3Pose,
    intrinsics: CameraIntrinsics,
    transformed_out: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized warp of M pixels.

    Args:
        uv: (M, 2) pixel coordinates.
        depths: (M,) depths in the reference view.
        transformed_out: optional (M, 3) buffer receiving the transformed
            points (needed by the Jacobian assembly).

    Returns:
        coords (M, 2), z (M,), valid (M,) with valid = z > EPSILON_Z.
    """
    uv = np.asarray(uv)
    rays = np.empty((uv.shape[0], 3), dtype=np.float64)
    rays[:, 0] = (uv[:, 0] - intrinsics.cx) / intrinsics.fx
    rays[:, 1] = (uv[:, 1] - intrinsics.cy) / intrinsics.fy
    rays[:, 2] = 1.0
    p1 = rays * np.asarray(depths, dtype=np.float64)[:, None]
    p2 = p1 @ pose.rotation.T + pose.translation
    if transformed_out is not None:
        transformed_out[...] = p2
    z = p2[:, 2]
    valid = z > EPSILON_Z
    zsafe = np.where(valid, z, 1.0)
    coords = np.empty((uv.shape[0], 2), dtype=np.float64)
    coords[:, 0] = intrinsics.fx * p2[:, 0] / zsafe + intrinsics.cx
    coords[:, 1] = intrinsics.fy * p2[:, 1] / zsafe + intrinsics.cy
    coords[~valid] = np.nan
    return coords, z.copy(), valid


def _projection_rows(p2: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d(u, v)/d(transformed point), shape (M, 2, 3). Caller masks z <= 0."""
    x, y, z = p2[:, 0], p2[:, 1], p2[:, 2]
    zsafe = np.where(z > EPSILON_Z, z, 1.0)
    inv_z = 1.0 / zsafe
    rows = np.zeros((p2.shape[0], 2, 3), dtype=np.float64)
    rows[:, 0, 0] = intrinsics.fx * inv_z
    rows[:, 0, 2] = -intrinsics.fx * x * inv_z * inv_z
    rows[:, 1, 1] = intrinsics.fy * inv_z
    rows[:, 1, 2] = -intrinsics.fy * y * inv_z * inv_z
    return rows


def warp_jacobian_pose_many(
    p2: np.ndarray, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """d(warped u, v)/d(twist) under a left-multiplied update, (M, 2, 6).

    Columns are ordered (omega, nu).  p2 holds the already-transformed
    points; the derivative of X2(delta) = exp(delta) @ X2 at delta = 0 is
    -[X2]x for omega and the identity for nu.
    """
    rows = _projection_rows(p2, intrinsics)
    x, y, z = p2[:, 0], p2[:, 1], p2[:, 2]
    jac = np.empty((p2.shape[0], 2, 6), dtype=np.float64)
    # P @ -[X2]x, written out to stay allocation-light.
    # -[X2]x columns: c0 = (0, -z, y), c1 = (z, 0, -x), c2 = (-y, x, 0)
    px, pz = rows[:, :, 0], rows[:, :, 2]
    py = rows[:, :, 1]
    jac[:, :, 0] = pz * y[:, None] - py * z[:, None]
    jac[:, :, 1] = px * z[:, None] - pz * x[:, None]
    jac[:, :, 2] = py * x[:, None] - px * y[:, None]
    jac[:, :, 3:6] = rows
    return jac


def warp_jacobian_depth_many(
    uv: np.ndarray,
    p2: np.ndarray,
    pose: SE3Pose,
    intrinsics: CameraIntrinsics,
) -> np.ndarray:
    """d(warped u, v)/d(reference depth), shape (M, 2).

    The transformed point moves along the rotated ray R @ K^-1 x~ as depth
    changes; the projection rows close the chain.
    """
    uv = np.asarray(uv)
    rays = np.empty((uv.shape[0], 3), dtype=np.float64)
    rays[:, 0] = (uv[:, 0] - intrinsics.cx) / intrinsics.fx
    rays[:, 1] = (uv[:, 1] - intrinsics.cy) / intrinsics.fy
    rays[:, 2] = 1.0
    dirs = rays @ pose.rotation.T
    rows = _projection_rows(p2, intrinsics)
    return np.einsum("mij,mj->mi", rows, dirs)


def warp_jacobian_pose(
    x: PixelCoord, depth: float, pose: SE3Pose, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Single-pixel convenience wrapper, shape (2, 6)."""
    p2 = pose.rotation @ backproject(x, depth, intrinsics) + pose.translation
    return warp_jacobian_pose_many(p2[None, :], intrinsics)[0]


def warp_jacobian_depth(
    x: PixelCoord, depth: float, pose: SE3Pose, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Single-pixel convenience wrapper, shape (2,)."""
    p2 = pose.rotation @ backproject(x, depth, intrinsics) + pose.translation
    uv = np.array([[x.u, x.v]])
    return warp_jacobian_depth_many(uv, p2[None, :], pose, intrinsics)[0]


def rotation_angle_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of r1 @ r2.T in degrees."""
    rel = r1 @ r2.T
    cos_theta = np.clip((np.trace(rel) - 1.0) * 0.5, -1.0, 1.0)
    return math.degrees(math.acos(float(cos_theta)))


def translation_angle_deg(t1: np.ndarray, t2: np.ndarray) -> float:
    """Angle between translation directions in degrees; nan if either is ~0."""
    n1 = np.linalg.norm(t1)
    n2 = np.linalg.norm(t2)
    if n1 < 1e-9 or n2 < 1e-9:
        return math.nan
    cos_a = np.clip(t1 @ t2 / (n1 * n2), -1.0, 1.0)
    return math.degrees(math.acos(float(cos_a)))
