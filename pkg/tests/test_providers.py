"""Jacobian provider contracts: numerical pass-through, warped-map
consistency, and the prediction network's wiring."""

import numpy as np
import pytest

from regalign.depth_basis import build_basis
from regalign.errors import DimensionError
from regalign.geometry import CameraIntrinsics, SE3Pose, Twist, se3_exp
from regalign.image import FeatureMap
from regalign.providers import (
    LearnedJacobianParams,
    LearnedProvider,
    NumericalProvider,
    jpn_forward,
    learned_provider,
    numerical_provider,
    warp_feature_map,
)
from regalign.residual import (
    AlignmentProblem,
    assemble_numerical_jacobian,
    compute_residual,
    evaluate_residual_and_jacobian,
)
from regalign.streams import stream_rng

W, H, C = 16, 12, 3


def make_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=20.0, fy=19.0, cx=(W - 1) / 2, cy=(H - 1) / 2, width=W, height=H)


def smooth_map(seed: int, channels: int = C) -> FeatureMap:
    rng = stream_rng(seed, "providers", "map")
    coarse = rng.uniform(0.0, 1.0, size=(3, 4, channels))
    u = np.linspace(0, 3 - 1e-9, W)
    v = np.linspace(0, 2 - 1e-9, H)
    u0, v0 = np.floor(u).astype(int), np.floor(v).astype(int)
    fu, fv = u - u0, v - v0
    top = coarse[v0][:, u0] * (1 - fu)[None, :, None] + coarse[v0][:, u0 + 1] * fu[None, :, None]
    bot = coarse[v0 + 1][:, u0] * (1 - fu)[None, :, None] + coarse[v0 + 1][:, u0 + 1] * fu[None, :, None]
    return FeatureMap(top * (1 - fv)[:, None, None] + bot * fv[:, None, None])


def make_problem(optimize_depth=False, channels=C):
    f1 = smooth_map(1, channels)
    f2 = smooth_map(2, channels)
    depth = 3.0 + 0.3 * np.cos(np.arange(H)[:, None] / 3.0) + 0.2 * np.sin(np.arange(W)[None, :] / 4.0)
    basis = build_basis(depth, n=4)
    uu, vv = np.meshgrid(np.arange(2, W - 2), np.arange(2, H - 2))
    pixel_set = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1).astype(np.int64)
    problem = AlignmentProblem.build(
        f1, f2, make_intrinsics(), basis, optimize_depth=optimize_depth, pixel_set=pixel_set
    )
    return problem, basis.w_star


def small_pose() -> SE3Pose:
    return se3_exp(Twist.from_array(np.array([0.01, -0.02, 0.015, 0.05, 0.02, -0.04])))


class TestNumericalProvider:
    def test_delegates_to_residual_assembly(self):
        problem, w = make_problem(optimize_depth=True)
        pose = small_pose()
        np.testing.assert_array_equal(
            numerical_provider(problem, pose, w).entries,
            assemble_numerical_jacobian(problem, pose, w).entries,
        )

    def test_evaluate_matches_separate_calls(self):
        problem, w = make_problem()
        pose = small_pose()
        res, jac = NumericalProvider().evaluate(problem, pose, w)
        np.testing.assert_array_equal(res.values, compute_residual(problem, pose, w).values)
        np.testing.assert_array_equal(jac.entries, assemble_numerical_jacobian(problem, pose, w).entries)


class TestWarpedFeatureMap:
    def test_identity_pose_reproduces_f2_interior(self):
        problem, w = make_problem()
        warped = warp_feature_map(problem.f2, SE3Pose.identity(), w, problem.basis, problem.intrinsics)
        assert warped.channels == C + 1
        np.testing.assert_allclose(
            warped.data[1:-1, 1:-1, :C], problem.f2.data[1:-1, 1:-1], atol=1e-6
        )
        assert (warped.data[1:-1, 1:-1, C] == 1.0).all()

    def test_out_of_view_pose_zeroes_map_and_validity(self):
        problem, w = make_problem()
        gone = se3_exp(Twist.from_array(np.array([0.0, 0.0, 0.0, 50.0, 0.0, 0.0])))
        warped = warp_feature_map(problem.f2, gone, w, problem.basis, problem.intrinsics)
        np.testing.assert_array_equal(warped.data, 0.0)

    def test_residual_equals_f1_minus_warped_map(self):
        problem, w = make_problem()
        pose = small_pose()
        warped = warp_feature_map(problem.f2, pose, w, problem.basis, problem.intrinsics)
        res = compute_residual(problem, pose, w)
        pix = problem.pixel_set
        valid = res.valid
        direct = (
            problem.f1.data[pix[:, 1], pix[:, 0], :]
            - warped.data[pix[:, 1], pix[:, 0], :C]
        )
        np.testing.assert_allclose(
            res.values.reshape(-1, C)[valid], direct[valid], rtol=0, atol=1e-12
        )
        np.testing.assert_array_equal(
            warped.data[pix[:, 1], pix[:, 0], C][valid], 1.0
        )


class TestPredictionNetwork:
    def test_initialize_shapes_and_zero_head(self):
        params = LearnedJacobianParams.initialize(C, seed=5)
        assert params.tensors["stem.w"].shape == (64, 2 * C + 1, 1, 1)
        assert params.tensors["res0.c1.w"].shape == (64, 64, 3, 3)
        assert params.tensors["head.w"].shape == (6 * C, 64, 1, 1)
        np.testing.assert_array_equal(params.tensors["head.w"], 0.0)
        np.testing.assert_array_equal(params.tensors["head.b"], 0.0)
        bound = np.sqrt(6.0 / (2 * C + 1))
        stem = params.tensors["stem.w"]
        assert np.abs(stem).max() <= bound and np.abs(stem).max() > 0.5 * bound
        again = LearnedJacobianParams.initialize(C, seed=5)
        np.testing.assert_array_equal(stem, again.tensors["stem.w"])

    def test_zero_head_predicts_zero_jacobian(self):
        problem, w = make_problem()
        params = LearnedJacobianParams.initialize(C, seed=7)
        jac = learned_provider(problem, small_pose(), w, params)
        np.testing.assert_array_equal(jac.entries, 0.0)
        assert jac.entries.shape == (problem.pixel_set.shape[0] * C, 6)

    def test_zero_blocks_reduce_to_per_pixel_perceptron(self):
        params = LearnedJacobianParams.initialize(C, seed=3)
        tensors = dict(params.tensors)
        for i in range(4):
            for layer in ("c1", "c2"):
                tensors[f"res{i}.{layer}.w"] = np.zeros_like(tensors[f"res{i}.{layer}.w"])
        rng = stream_rng(11, "head")
        tensors["head.w"] = rng.normal(size=tensors["head.w"].shape).astype(np.float32)
        tensors["head.b"] = rng.normal(size=tensors["head.b"].shape).astype(np.float32)
        params = LearnedJacobianParams(C, tensors)
        x = stream_rng(13, "x").normal(size=(2 * C + 1, 5, 6)).astype(np.float32)
        got = jpn_forward(params, x)
        stem_w = tensors["stem.w"][:, :, 0, 0]
        head_w = tensors["head.w"][:, :, 0, 0]
        hidden = np.maximum(np.einsum("oc,chw->ohw", stem_w, x) + tensors["stem.b"][:, None, None], 0.0)
        want = np.einsum("oc,chw->ohw", head_w, hidden) + tensors["head.b"][:, None, None]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-5)

    def test_depth_columns_stay_numerical(self):
        problem, w = make_problem(optimize_depth=True)
        pose = small_pose()
        params = LearnedJacobianParams.initialize(C, seed=9)
        tensors = dict(params.tensors)
        rng = stream_rng(10, "head")
        tensors["head.w"] = 0.01 * rng.normal(size=tensors["head.w"].shape).astype(np.float32)
        params = LearnedJacobianParams(C, tensors)
        jac = learned_provider(problem, pose, w, params)
        reference = assemble_numerical_jacobian(problem, pose, w)
        n = problem.basis.n
        np.testing.assert_allclose(
            jac.entries[:, 6:], reference.entries[:, 6:], rtol=0, atol=1e-12
        )
        assert jac.entries.shape[1] == 6 + n
        # Pose block comes from the network, not the numerical chain.
        assert np.abs(jac.entries[:, :6] - reference.entries[:, :6]).max() > 1e-6

    def test_provider_deterministic_and_invalid_rows_zero(self):
        problem, w = make_problem()
        pose = se3_exp(Twist.from_array(np.array([0.0, 0.0, 0.0, 1.4, 0.0, 0.0])))
        params = LearnedJacobianParams.initialize(C, seed=9)
        tensors = dict(params.tensors)
        tensors["head.w"] = np.full_like(tensors["head.w"], 0.01)
        params = LearnedJacobianParams(C, tensors)
        provider = LearnedProvider(params)
        res1, jac1 = provider.evaluate(problem, pose, w)
        res2, jac2 = provider.evaluate(problem, pose, w)
        np.testing.assert_array_equal(jac1.entries, jac2.entries)
        assert not res1.valid.all() and res1.valid.any()
        rows = np.repeat(~res1.valid, C)
        np.testing.assert_array_equal(jac1.entries[rows], 0.0)
        np.testing.assert_array_equal(res1.values.reshape(-1, C)[~res1.valid], 0.0)

    def test_residual_matches_numerical_provider_exactly(self):
        problem, w = make_problem()
        pose = small_pose()
        params = LearnedJacobianParams.initialize(C, seed=2)
        res_learned, _ = LearnedProvider(params).evaluate(problem, pose, w)
        res_numerical = compute_residual(problem, pose, w)
        np.testing.assert_allclose(
            res_learned.values, res_numerical.values, rtol=0, atol=1e-12
        )
        np.testing.assert_array_equal(res_learned.valid, res_numerical.valid)

    def test_shape_validation(self):
        params = LearnedJacobianParams.initialize(C, seed=1)
        bad = dict(params.tensors)
        bad["stem.w"] = bad["stem.w"][:, :-1]
        with pytest.raises(DimensionError):
            LearnedJacobianParams(C, bad)
        problem, w = make_problem(channels=C + 1)
        with pytest.raises(DimensionError):
            learned_provider(problem, small_pose(), w, params)
