"""Scene generation, rendering, and pose perturbation."""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from regalign import synth
from regalign.errors import DimensionError, InfeasiblePoseError
from regalign.geometry import SE3Pose, compose, inverse, se3_log
from regalign.image import FeatureMap, bilinear_many, numerical_gradient
from regalign.streams import stream_rng

SMALL = synth.SceneParams(width=64, height=48)


class TestSceneGeneration:
    def test_same_seed_bit_identical(self):
        a = synth.render_view(synth.generate_scene(7, SMALL))
        b = synth.render_view(synth.generate_scene(7, SMALL))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = synth.render_view(synth.generate_scene(1, SMALL))
        b = synth.render_view(synth.generate_scene(2, SMALL))
        assert np.max(np.abs(a - b)) > 0.05

    def test_zero_amplitude_is_planar(self):
        params = synth.SceneParams(width=64, height=48, amplitude=0.0)
        depth = synth.render_depth(synth.generate_scene(3, params))
        np.testing.assert_allclose(depth, params.base_depth, rtol=1e-12)

    def test_depth_strictly_positive_and_within_band(self):
        scene = synth.generate_scene(4, SMALL)
        depth = synth.render_depth(scene)
        assert np.all(depth > 0)
        assert np.all(depth >= SMALL.base_depth - SMALL.amplitude - 1e-6)
        assert np.all(depth <= SMALL.base_depth + SMALL.amplitude + 1e-6)

    def test_texture_gradients_non_degenerate_over_seeds(self):
        # Rendered gradients must carry signal: std above 1% of range.
        for seed in range(100):
            scene = synth.generate_scene(seed, SMALL)
            img = synth.render_view(scene)
            gu, gv = numerical_gradient(FeatureMap(img[..., None]))
            dyn = img.max() - img.min()
            assert dyn > 0.1, f"seed {seed}: texture nearly flat"
            g_std = np.std(np.concatenate([gu.data.ravel(), gv.data.ravel()]))
            assert g_std > 0.01 * dyn, f"seed {seed}: gradient std {g_std:.4f}"

    def test_parameter_validation(self):
        with pytest.raises(DimensionError):
            synth.SceneParams(base_depth=1.0, amplitude=0.8)
        with pytest.raises(DimensionError):
            synth.SceneParams(texture_octaves=0)
        with pytest.raises(DimensionError):
            synth.SceneParams(width=60, height=48)


class TestRenderPair:
    def test_identity_pose_renders_identical_views(self):
        scene = synth.generate_scene(5, SMALL)
        pair = synth.render_pair(scene, SE3Pose.identity())
        np.testing.assert_array_equal(pair.i1.data, pair.i2.data)
        assert pair.consistency_rms < 1e-12
        # border pixels may fall out of the sampling footprint by one ulp;
        # every interior pixel must be visible
        assert np.all(pair.occlusion[1:-1, 1:-1] == 255)
        assert pair.visibility > 0.99

    def test_warp_consistency_within_two_percent(self):
        scene = synth.generate_scene(6, SMALL)
        rng = stream_rng(0, "test", "pose")
        t_star = synth.perturb_pose(
            SE3Pose.identity(), 5.0, 0.05, SMALL.base_depth, rng
        )
        pair = synth.render_pair(scene, t_star)
        assert pair.consistency_rms < synth.consistency_threshold(
            pair.i1.data[:, :, 0]
        )

    def test_planar_scene_z_rotation_constant_depth(self):
        params = synth.SceneParams(width=64, height=48, amplitude=0.0)
        scene = synth.generate_scene(8, params)
        rot_z = se3_exp_z(10.0)
        pair = synth.render_pair(scene, rot_z)
        np.testing.assert_allclose(pair.d_star, params.base_depth, rtol=1e-12)

    def test_excessive_baseline_raises(self):
        scene = synth.generate_scene(9, SMALL)
        bad = SE3Pose(np.eye(3), np.array([50.0, 0.0, 0.0]))
        with pytest.raises(InfeasiblePoseError):
            synth.render_pair(scene, bad)

    def test_occlusion_mask_mostly_visible_on_gentle_pose(self):
        scene = synth.generate_scene(10, SMALL)
        rng = stream_rng(1, "test", "pose")
        t_star = synth.perturb_pose(
            SE3Pose.identity(), 3.0, 0.05, SMALL.base_depth, rng
        )
        pair = synth.render_pair(scene, t_star)
        assert pair.visibility > 0.8
        assert set(np.unique(pair.occlusion)) <= {0, 255}


def se3_exp_z(angle_deg: float) -> SE3Pose:
    from regalign.geometry import Twist, se3_exp

    return se3_exp(Twist(np.array([0.0, 0.0, np.radians(angle_deg)]), np.zeros(3)))


class TestPerturbPose:
    def test_zero_ranges_identity(self):
        rng = stream_rng(0, "perturb")
        base = se3_exp_z(7.0)
        out = synth.perturb_pose(base, 0.0, 0.0, 4.0, rng)
        np.testing.assert_allclose(out.rotation, base.rotation, atol=1e-15)
        np.testing.assert_allclose(out.translation, base.translation, atol=1e-15)

    def test_translation_offset_norm_exact(self):
        base = se3_exp_z(5.0)
        for k in range(20):
            rng = stream_rng(2, "perturb", k)
            out = synth.perturb_pose(base, 10.0, 0.10, 4.0, rng)
            offset = compose(out, inverse(base))
            assert abs(np.linalg.norm(offset.translation) - 0.4) < 1e-12

    def test_rotation_components_within_range(self):
        base = SE3Pose.identity()
        for k in range(50):
            rng = stream_rng(3, "perturb", k)
            out = synth.perturb_pose(base, 10.0, 0.0, 4.0, rng)
            omega = se3_log(out).omega
            assert np.all(np.abs(np.degrees(omega)) <= 10.0 + 1e-9)

    def test_axis_components_uniform_ks(self):
        # 10^4 draws per axis: KS against U(-r, r) must not reject.
        r = 10.0
        n = 10_000
        comps = np.empty((n, 3))
        for k in range(n):
            rng = stream_rng(4, "perturb", k)
            out = synth.perturb_pose(SE3Pose.identity(), r, 0.0, 4.0, rng)
            comps[k] = np.degrees(se3_log(out).omega)
        for axis in range(3):
            p = stats.kstest(comps[:, axis], "uniform", args=(-r, 2 * r)).pvalue
            assert p > 0.01, f"axis {axis}: KS p={p:.4f}"

    def test_translation_direction_isotropic(self):
        n = 2000
        dirs = np.empty((n, 3))
        for k in range(n):
            rng = stream_rng(5, "perturb", k)
            out = synth.perturb_pose(SE3Pose.identity(), 0.0, 0.1, 4.0, rng)
            dirs[k] = out.translation / np.linalg.norm(out.translation)
        # each Cartesian component of a uniform direction has mean 0
        assert np.all(np.abs(dirs.mean(axis=0)) < 0.05)

    def test_negative_ranges_rejected(self):
        with pytest.raises(DimensionError):
            synth.perturb_pose(SE3Pose.identity(), -1.0, 0.1, 4.0, stream_rng(0))


class TestDataset:
    def test_generate_load_roundtrip_and_determinism(self, tmp_path):
        out1 = tmp_path / "d1"
        out2 = tmp_path / "d2"
        m1, rej1 = synth.generate_dataset(out1, n_scenes=1, seed=11, params=SMALL)
        m2, rej2 = synth.generate_dataset(out2, n_scenes=1, seed=11, params=SMALL)
        assert m1 == m2 and rej1 == rej2
        assert len(m1["pairs"]) == len(synth.DATASET_BASELINES)
        for entry in m1["pairs"]:
            for key in entry["paths"].values():
                assert (out1 / key).read_bytes() == (out2 / key).read_bytes()
        assert (out1 / "manifest.json").read_bytes() == (
            out2 / "manifest.json"
        ).read_bytes()

    def test_loaded_pair_consistency(self, tmp_path):
        out = tmp_path / "d"
        manifest, _ = synth.generate_dataset(out, n_scenes=1, seed=12, params=SMALL)
        entry = manifest["pairs"][1]
        pair = synth.load_pair(out, entry)
        assert pair.pair_id == entry["id"]
        assert pair.i1.data.shape == (SMALL.height, SMALL.width, 1)
        assert np.all(pair.d_star > 0)
        # the emitted pair must satisfy the dataset fitness bound
        k = pair.intrinsics
        us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
        rays = np.stack(
            [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, float)], axis=-1
        )
        p2 = (pair.d_star[..., None] * rays) @ pair.t_star.rotation.T
        p2 = p2 + pair.t_star.translation
        uv = np.stack(
            [k.fx * p2[..., 0] / p2[..., 2] + k.cx,
             k.fy * p2[..., 1] / p2[..., 2] + k.cy], axis=-1
        )
        mask = pair.occlusion == 255
        sampled, ok = bilinear_many(pair.i2.data, uv[mask])
        diff = pair.i1.data[mask][ok, 0] - sampled[ok, 0]
        rms = np.sqrt(np.mean(diff**2))
        assert rms < synth.consistency_threshold(pair.i1.data[:, :, 0])

    def test_manifest_schema_fields(self, tmp_path):
        manifest, _ = synth.generate_dataset(
            tmp_path / "d", n_scenes=1, seed=13, params=SMALL
        )
        assert manifest["schema_version"] == 1
        entry = manifest["pairs"][0]
        assert set(entry) == {"id", "seed", "K", "T_star", "paths"}
        assert len(entry["T_star"]) == 16
        raw = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert raw == manifest
