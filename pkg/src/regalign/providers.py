"""Pluggable Jacobian sources for the LM solver.

Two providers share one calling convention: given (problem, pose, w) produce
the residual and the Jacobian from a single warp pass.  The numerical
provider chains sampled feature gradients with analytic warp derivatives;
the learned provider runs a small convolutional network over the
concatenation of f1, the warped f2, and a validity channel, and emits the
6-column pose block per pixel directly.  Depth-weight columns always come
from the numerical path: the network only ever replaces the pose block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .depth_basis import DepthBasis, decode_depth
from .errors import DimensionError
from .geometry import CameraIntrinsics, SE3Pose, warp_many
from .image import FeatureMap, bilinear_many, pixel_grid
from .nnops import conv2d_chw, relu
from .residual import (
    AlignmentProblem,
    JacobianMatrix,
    ResidualVector,
    WarpFields,
    evaluate_residual_and_jacobian,
    jacobian_from_fields,
    residual_from_fields,
)
from .streams import stream_rng

JPN_HIDDEN = 64
JPN_BLOCKS = 4


def numerical_provider(problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray) -> JacobianMatrix:
    from .residual import assemble_numerical_jacobian

    return assemble_numerical_jacobian(problem, pose, w)


class NumericalProvider:
    """Stateless provider delegating to the residual module."""

    name = "numerical"

    def evaluate(
        self, problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray
    ) -> tuple[ResidualVector, JacobianMatrix]:
        return evaluate_residual_and_jacobian(problem, pose, w)


def _expected_jpn_shapes(feature_channels: int, hidden: int = JPN_HIDDEN) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {
        "stem.w": (hidden, 2 * feature_channels + 1, 1, 1),
        "stem.b": (hidden,),
    }
    for i in range(JPN_BLOCKS):
        shapes[f"res{i}.c1.w"] = (hidden, hidden, 3, 3)
        shapes[f"res{i}.c1.b"] = (hidden,)
        shapes[f"res{i}.c2.w"] = (hidden, hidden, 3, 3)
        shapes[f"res{i}.c2.b"] = (hidden,)
    shapes["head.w"] = (6 * feature_channels, hidden, 1, 1)
    shapes["head.b"] = (6 * feature_channels,)
    return shapes


@dataclass(frozen=True)
class LearnedJacobianParams:
    """Weights of the Jacobian prediction network.

    Input is [f1, warped f2, validity] with 2C+1 channels; output has 6*C
    channels, pixel (c, j) block entry at channel c*6 + j.  The head starts
    at zero so an untrained network predicts J = 0 and the LM step is a
    no-op.
    """

    feature_channels: int
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self) -> None:
        expected = _expected_jpn_shapes(self.feature_channels)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) ^ set(self.tensors))
            raise DimensionError(f"jacobian net tensor names off by {missing}")
        for name, shape in expected.items():
            got = self.tensors[name]
            if got.shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {got.shape}")
            if not np.isfinite(got).all():
                raise DimensionError(f"{name}: non-finite values")

    @staticmethod
    def initialize(feature_channels: int, seed: int) -> "LearnedJacobianParams":
        tensors: dict[str, np.ndarray] = {}
        for name, shape in _expected_jpn_shapes(feature_channels).items():
            if name.endswith(".b") or name.startswith("head."):
                tensors[name] = np.zeros(shape, dtype=np.float32)
                continue
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            rng = stream_rng(seed, "jpn", name)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return LearnedJacobianParams(feature_channels, tensors)


def jpn_forward(params: LearnedJacobianParams, x: np.ndarray) -> np.ndarray:
    """(2C+1, H, W) input -> (6C, H, W) pose-block predictions."""
    t = params.tensors
    h = relu(conv2d_chw(x, t["stem.w"], t["stem.b"], pad=0))
    for i in range(JPN_BLOCKS):
        inner = relu(conv2d_chw(h, t[f"res{i}.c1.w"], t[f"res{i}.c1.b"], pad=1))
        h = h + conv2d_chw(inner, t[f"res{i}.c2.w"], t[f"res{i}.c2.b"], pad=1)
    return conv2d_chw(h, t["head.w"], t["head.b"], pad=0)


def _full_grid_fields(
    f2: FeatureMap,
    pose: SE3Pose,
    w: np.ndarray,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
) -> WarpFields:
    from .geometry import EPSILON_Z

    pix = pixel_grid(f2.width, f2.height)
    depth_map = decode_depth(w, basis)
    d = depth_map.reshape(-1)
    depth_ok = d > EPSILON_Z
    p2 = np.empty((pix.shape[0], 3), dtype=np.float64)
    coords, _, in_front = warp_many(pix, d, pose, intrinsics, transformed_out=p2)
    samples, sample_ok = bilinear_many(f2.data, coords)
    valid = depth_ok & in_front & sample_ok
    samples[~valid] = 0.0
    return WarpFields(coords, p2, d, valid, samples)


def warp_feature_map(
    f2: FeatureMap,
    pose: SE3Pose,
    w: np.ndarray,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
) -> FeatureMap:
    """Sample f2 at the warped grid; invalid pixels zero, validity appended."""
    fields = _full_grid_fields(f2, pose, w, basis, intrinsics)
    h, w_, c = f2.height, f2.width, f2.channels
    out = np.empty((h, w_, c + 1), dtype=f2.data.dtype)
    out[:, :, :c] = fields.f2_samples.reshape(h, w_, c)
    out[:, :, c] = fields.valid.reshape(h, w_).astype(f2.data.dtype)
    return FeatureMap(out)


def learned_provider(
    problem: AlignmentProblem,
    pose: SE3Pose,
    w: np.ndarray,
    params: LearnedJacobianParams,
) -> JacobianMatrix:
    _, jac = _learned_evaluate(problem, pose, w, params)
    return jac


def _learned_evaluate(
    problem: AlignmentProblem,
    pose: SE3Pose,
    w: np.ndarray,
    params: LearnedJacobianParams,
) -> tuple[ResidualVector, JacobianMatrix]:
    c = problem.f1.channels
    if params.feature_channels != c:
        raise DimensionError(
            f"params built for {params.feature_channels} channels, problem has {c}"
        )
    h, w_ = problem.f1.height, problem.f1.width
    fields = _full_grid_fields(problem.f2, pose, w, problem.basis, problem.intrinsics)

    net_in = np.empty((2 * c + 1, h, w_), dtype=np.float32)
    net_in[:c] = problem.f1.data.transpose(2, 0, 1)
    net_in[c : 2 * c] = fields.f2_samples.reshape(h, w_, c).transpose(2, 0, 1)
    net_in[2 * c] = fields.valid.reshape(h, w_)
    pred = jpn_forward(params, net_in)  # (6C, H, W)

    pix = problem.pixel_set
    flat = pix[:, 1] * w_ + pix[:, 0]
    pixel_fields = WarpFields(
        fields.coords[flat],
        fields.transformed[flat],
        fields.depths[flat],
        fields.valid[flat],
        fields.f2_samples[flat],
    )
    res = residual_from_fields(problem, pixel_fields)

    m = pix.shape[0]
    p = problem.n_parameters
    entries = np.zeros((m, c, p), dtype=np.float64)
    entries[:, :, :6] = (
        pred[:, pix[:, 1], pix[:, 0]].T.reshape(m, c, 6).astype(np.float64)
    )
    if problem.optimize_depth:
        numerical = jacobian_from_fields(problem, pose, w, pixel_fields)
        entries[:, :, 6:] = numerical.entries.reshape(m, c, p)[:, :, 6:]
    entries[~pixel_fields.valid] = 0.0
    return res, JacobianMatrix(entries.reshape(m * c, p))


@dataclass(frozen=True)
class LearnedProvider:
    """Provider running the Jacobian prediction network at one level."""

    params: LearnedJacobianParams
    name: str = "learned"

    def evaluate(
        self, problem: AlignmentProblem, pose: SE3Pose, w: np.ndarray
    ) -> tuple[ResidualVector, JacobianMatrix]:
        return _learned_evaluate(problem, pose, w, self.params)
