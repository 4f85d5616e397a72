"""Feature-metric residual and its numerically assembled Jacobian.

The residual at pixel x is r = f1(x) - f2(warp(x, T, D)) with D decoded from
the depth weights.  Pixels whose warp leaves the target grid, lands behind
the camera, or decodes to non-positive depth contribute zero residual rows
and zero Jacobian rows; the cost divides by the number of surviving pixels
so that pyramid levels are comparable.

Jacobian rows chain grid-sampled feature gradients of f2 with the analytic
warp derivatives; the leading minus comes from the residual's sign.  Columns
are ordered pose twist (omega, nu) first, then depth weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth_basis import DepthBasis, decode_depth, depth_jacobian
from .errors import DimensionError, DivergedError
from .geometry import (
    EPSILON_Z,
    CameraIntrinsics,
    SE3Pose,
    warp_jacobian_depth_many,
    warp_jacobian_pose_many,
    warp_many,
)
from .image import FeatureMap, bilinear_many, numerical_gradient, pixel_grid


@dataclass(frozen=True)
class AlignmentProblem:
    """Everything fixed during one level's optimization."""

    f1: FeatureMap
    f2: FeatureMap
    grad_f2_u: FeatureMap
    grad_f2_v: FeatureMap
    intrinsics: CameraIntrinsics
    basis: DepthBasis
    optimize_depth: bool
    pixel_set: np.ndarray  # (M, 2) integer pixels of f1

    def __post_init__(self) -> None:
        if self.f1.data.shape != self.f2.data.shape:
            raise DimensionError("f1 and f2 shapes differ")
        if (self.f1.height, self.f1.width) != (self.intrinsics.height, self.intrinsics.width):
            raise DimensionError("intrinsics size does not match the feature maps")
        if (self.basis.height, self.basis.width) != (self.f1.height, self.f1.width):
            raise DimensionError("depth basis resolution does not match the feature maps")
        pix = np.asarray(self.pixel_set, dtype=np.int64)
        if pix.ndim != 2 or pix.shape[1] != 2:
            raise DimensionError("pixel set must be (M, 2)")
        pix.flags.writeable = False
        object.__setattr__(self, "pixel_set", pix)

    @staticmethod
    def build(
        f1: FeatureMap,
        f2: FeatureMap,
        intrinsics: CameraIntrinsics,
        basis: DepthBasis,
        optimize_depth: bool = False,
        pixel_set: np.ndarray | None = None,
    ) -> "AlignmentProblem":
        gu, gv = numerical_gradient(f2)
        if pixel_set is None:
            pixel_set = pixel_grid(f1.width, f1.height).astype(np.int64)
        return AlignmentProblem(f1, f2, gu, gv, intrinsics, basis, optimize_depth, pixel_set)

    @property
    def n_parameters(self) -> int:
        return 6 + (self.basis.n if self.optimize_depth else 0)


@dataclass(frozen=True)
class ResidualVector:
    """Stacked per-pixel feature differences, invalid rows zeroed."""

    values: np.ndarray  # (M * C,)
    valid: np.ndarray  # (M,)


@dataclass(frozen=True)
class JacobianMatrix:
    """Rows match ResidualVector.values; pose columns first, then weights."""

    entries: np.ndarray  # (M * C, P)
    n_pose: int = 6


@dataclass(frozen=True)
class WarpFields:
    """Per-pixel warp byproducts shared between residual and Jacobian."""

    coords: np.ndarray  # (M, 2) warped coordinates
    transformed: np.ndarray  # (M, 3) points in the target camera frame
    depths: np.ndarray  # (M,) decoded reference depths
    valid: np.ndarray  # (M,) all validity conditions combined
    f2_samples: np.ndarray  # (M, C) bilinear samples of f2, invalid rows zero


def warp_fields(problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray) -> WarpFields:
    pix = problem.pixel_set
    depth_map = decode_depth(w, problem.basis)
    d = depth_map[pix[:, 1], pix[:, 0]]
    depth_ok = d > EPSILON_Z
    p2 = np.empty((pix.shape[0], 3), dtype=np.float64)
    coords, _, in_front = warp_many(
        pix.astype(np.float64), d, pose, problem.intrinsics, transformed_out=p2
    )
    samples, sample_ok = bilinear_many(problem.f2.data, coords)
    valid = depth_ok & in_front & sample_ok
    samples[~valid] = 0.0
    return WarpFields(coords, p2, d, valid, samples)


def residual_from_fields(problem: AlignmentProblem, fields: WarpFields) -> ResidualVector:
    pix = problem.pixel_set
    f1v = problem.f1.data[pix[:, 1], pix[:, 0], :].astype(np.float64)
    diff = f1v - fields.f2_samples
    diff[~fields.valid] = 0.0
    return ResidualVector(diff.reshape(-1), fields.valid)


def compute_residual(problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray) -> ResidualVector:
    return residual_from_fields(problem, warp_fields(problem, pose, w))


def cost(residual: ResidualVector) -> float:
    """Sum of squared valid entries divided by the valid-pixel count."""
    n_valid = int(residual.valid.sum())
    if n_valid == 0:
        raise DivergedError("no valid pixels in residual")
    sq = np.dot(
        residual.values.astype(np.float64), residual.values.astype(np.float64)
    )
    return float(sq / n_valid)


def jacobian_from_fields(
    problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray, fields: WarpFields
) -> JacobianMatrix:
    pix = problem.pixel_set
    m = pix.shape[0]
    c = problem.f1.channels
    p = problem.n_parameters

    gu, _ = bilinear_many(problem.grad_f2_u.data, fields.coords)
    gv, _ = bilinear_many(problem.grad_f2_v.data, fields.coords)
    # (M, C, 2) feature gradients at the warped coordinates.
    g = np.stack([gu, gv], axis=2)

    jw = warp_jacobian_pose_many(fields.transformed, problem.intrinsics)  # (M, 2, 6)
    entries = np.empty((m, c, p), dtype=np.float64)
    np.matmul(g, jw, out=entries[:, :, :6])
    if problem.optimize_depth:
        jd = warp_jacobian_depth_many(
            pix.astype(np.float64), fields.transformed, pose, problem.intrinsics
        )  # (M, 2)
        gd = np.einsum("mcx,mx->mc", g, jd)  # (M, C)
        ddw = depth_jacobian(w, problem.basis, pix)  # (M, N)
        np.multiply(gd[:, :, None], ddw[:, None, :], out=entries[:, :, 6:])
    np.negative(entries, out=entries)
    entries[~fields.valid] = 0.0
    return JacobianMatrix(entries.reshape(m * c, p))


def assemble_numerical_jacobian(
    problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray
) -> JacobianMatrix:
    fields = warp_fields(problem, pose, w)
    return jacobian_from_fields(problem, pose, w, fields)


def evaluate_residual_and_jacobian(
    problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray
) -> tuple[ResidualVector, JacobianMatrix]:
    """Residual and numerical Jacobian sharing one warp pass."""
    fields = warp_fields(problem, pose, w)
    return (
        residual_from_fields(problem, fields),
        jacobian_from_fields(problem, pose, w, fields),
    )
