"""Synthetic scenes: textured heightfields rendered from two views.

A scene is a heightfield z(x, y) = base + amplitude * noise over the camera-1
frame (camera 1 at the origin looking down +z) carrying a multi-octave
value-noise albedo.  Pairs are rendered by exact ray-heightfield
intersection, supersampled 2x, and shipped with the ground-truth depth of
view 1, an occlusion mask, and the relative pose.  Every random choice
draws from a named stream, so datasets are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InfeasiblePoseError
from .geometry import CameraIntrinsics, SE3Pose, Twist, compose, se3_exp
from .image import FeatureMap, bilinear_many
from .image_io import load_pfm, load_pgm, load_png, save_pfm, save_pgm, save_png
from .streams import stream_key, stream_rng

# Heightfield extremes bracket every ray-surface root, so 30 bisection
# steps pin the hit to ~1e-8 scene units.
_BISECT_STEPS = 30
_EPSILON_DIR_Z = 1e-6
# Relative depth slack for the view-2 occlusion test.
_OCCLUSION_TOL = 1e-3

# Texture octave-0 frequency (cycles per scene unit) and the smoother
# two-octave field shaping the surface.
_TEXTURE_FREQ0 = 2.0
_SURFACE_FREQ0 = 0.35

_SPLITMIX_1 = np.uint64(0x9E3779B97F4A7C15)
_SPLITMIX_2 = np.uint64(0xBF58476D1CE4E5B9)
_SPLITMIX_3 = np.uint64(0x94D049BB133111EB)
_LATTICE_PX = np.uint64(0x9E3779B185EBCA87)
_LATTICE_PY = np.uint64(0xC2B2AE3D27D4EB4F)


@dataclass(frozen=True)
class SceneParams:
    base_depth: float = 4.0
    amplitude: float = 0.8
    texture_octaves: int = 4
    width: int = 128
    height: int = 96

    def __post_init__(self) -> None:
        if self.base_depth <= 0 or self.amplitude < 0:
            raise DimensionError("scene needs base_depth > 0 and amplitude >= 0")
        if self.base_depth < 2 * self.amplitude:
            raise DimensionError("base_depth must be at least twice the amplitude")
        if self.texture_octaves < 1:
            raise DimensionError("texture needs at least one octave")
        if self.width % 8 or self.height % 8:
            raise DimensionError("resolution must be divisible by 8 for the pyramid")

    def to_json(self) -> dict:
        return {
            "base_depth": self.base_depth,
            "amplitude": self.amplitude,
            "texture_octaves": self.texture_octaves,
            "width": self.width,
            "height": self.height,
        }


def _default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 1.1 * width
    return CameraIntrinsics(
        fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
        width=width, height=height,
    )


def _mix64(h: np.ndarray) -> np.ndarray:
    h = (h + _SPLITMIX_1) * _SPLITMIX_2
    h ^= h >> np.uint64(27)
    h *= _SPLITMIX_3
    h ^= h >> np.uint64(31)
    return h


def _lattice_values(ix: np.ndarray, iy: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) value at integer lattice points, hashed, unbounded domain."""
    h = ix.astype(np.int64).astype(np.uint64) * _LATTICE_PX
    h ^= iy.astype(np.int64).astype(np.uint64) * _LATTICE_PY
    h ^= key[0]
    h = _mix64(h)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _value_noise(xy: np.ndarray, freq: float, key: np.ndarray) -> np.ndarray:
    """Smooth value noise in [0, 1) at the given lattice frequency."""
    p = xy * freq
    i = np.floor(p)
    f = p - i
    # quintic fade keeps the first two derivatives continuous at cell edges
    w = f * f * f * (f * (f * 6.0 - 15.0) + 10.0)
    ix, iy = i[..., 0], i[..., 1]
    v00 = _lattice_values(ix, iy, key)
    v10 = _lattice_values(ix + 1, iy, key)
    v01 = _lattice_values(ix, iy + 1, key)
    v11 = _lattice_values(ix + 1, iy + 1, key)
    wx, wy = w[..., 0], w[..., 1]
    top = v00 + (v10 - v00) * wx
    bot = v01 + (v11 - v01) * wx
    return top + (bot - top) * wy


@dataclass(frozen=True)
class Scene:
    seed: int
    params: SceneParams
    intrinsics: CameraIntrinsics
    texture_keys: tuple = field(repr=False)
    surface_keys: tuple = field(repr=False)

    def texture_at(self, xy: np.ndarray) -> np.ndarray:
        """Albedo in [0, 1) at world (x, y) points, multi-octave value noise."""
        total = np.zeros(xy.shape[:-1], dtype=np.float64)
        norm = 0.0
        for o, key in enumerate(self.texture_keys):
            amp = 0.5**o
            total += amp * _value_noise(xy, _TEXTURE_FREQ0 * 2.0**o, key)
            norm += amp
        return total / norm

    def surface_height(self, xy: np.ndarray) -> np.ndarray:
        """Heightfield depth z(x, y), in [base - amplitude, base + amplitude]."""
        total = np.zeros(xy.shape[:-1], dtype=np.float64)
        norm = 0.0
        for o, key in enumerate(self.surface_keys):
            amp = 0.5**o
            total += amp * _value_noise(xy, _SURFACE_FREQ0 * 2.0**o, key)
            norm += amp
        centered = 2.0 * (total / norm) - 1.0
        return self.params.base_depth + self.params.amplitude * centered


def generate_scene(
    seed: int,
    params: SceneParams = SceneParams(),
    intrinsics: CameraIntrinsics | None = None,
) -> Scene:
    if intrinsics is None:
        intrinsics = _default_intrinsics(params.width, params.height)
    texture_keys = tuple(
        stream_key(seed, "texture", o) for o in range(params.texture_octaves)
    )
    surface_keys = tuple(stream_key(seed, "surface", o) for o in range(2))
    return Scene(int(seed), params, intrinsics, texture_keys, surface_keys)


def _intersect(
    scene: Scene, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-heightfield intersection by bisection.

    Rays are origin + s * dir with dir_z > 0.  The heightfield lives in
    [base - amp, base + amp], which brackets the first root of
    f(s) = z(s) - height(x(s), y(s)): f < 0 while the ray is above the
    surface (z smaller than the local height means nearer the camera here,
    looking down +z) and f > 0 past the deepest possible surface.
    """
    p = scene.params
    dz = dirs[..., 2]
    valid = dz > _EPSILON_DIR_Z
    dz_safe = np.where(valid, dz, 1.0)
    lo = ((p.base_depth - p.amplitude) - origin[2]) / dz_safe
    hi = ((p.base_depth + p.amplitude) - origin[2]) / dz_safe
    if p.amplitude == 0.0:
        return np.where(valid, lo, np.nan), valid
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        xy = origin[:2] + mid[..., None] * dirs[..., :2]
        f = (origin[2] + mid * dz_safe) - scene.surface_height(xy)
        above = f < 0.0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    s = 0.5 * (lo + hi)
    return np.where(valid, s, np.nan), valid


def _ray_dirs(coords: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """z = 1 ray directions for (..., 2) pixel coordinates."""
    k = intrinsics
    out = np.empty(coords.shape[:-1] + (3,), dtype=np.float64)
    out[..., 0] = (coords[..., 0] - k.cx) / k.fx
    out[..., 1] = (coords[..., 1] - k.cy) / k.fy
    out[..., 2] = 1.0
    return out


def render_view(scene: Scene, pose: SE3Pose | None = None) -> np.ndarray:
    """Intensity image from the T-displaced camera, 2x supersampled.

    pose maps view-1 (world) coordinates into the rendered camera's frame;
    None renders the canonical view-1 camera.  Rays that never reach the
    surface render as 0.
    """
    k = scene.intrinsics
    w2, h2 = 2 * k.width, 2 * k.height
    us = np.arange(w2, dtype=np.float64) / 2.0 - 0.25
    vs = np.arange(h2, dtype=np.float64) / 2.0 - 0.25
    coords = np.stack(np.meshgrid(us, vs), axis=-1)
    dirs = _ray_dirs(coords, k)
    if pose is None:
        origin = np.zeros(3)
    else:
        r_inv = pose.rotation.T
        origin = -r_inv @ pose.translation
        dirs = dirs @ pose.rotation  # (R^T d) rowwise
    s, valid = _intersect(scene, origin, dirs)
    xy = origin[:2] + np.where(valid, s, 0.0)[..., None] * dirs[..., :2]
    shade = np.where(valid, scene.texture_at(xy), 0.0)
    return 0.25 * (shade[0::2, 0::2] + shade[0::2, 1::2] + shade[1::2, 0::2] + shade[1::2, 1::2])


def render_depth(scene: Scene) -> np.ndarray:
    """Canonical-view depth at pixel centers (z of the surface hit)."""
    k = scene.intrinsics
    us = np.arange(k.width, dtype=np.float64)
    vs = np.arange(k.height, dtype=np.float64)
    coords = np.stack(np.meshgrid(us, vs), axis=-1)
    dirs = _ray_dirs(coords, k)
    s, _ = _intersect(scene, np.zeros(3), dirs)  # dir_z = 1: depth equals s
    return s


@dataclass(frozen=True)
class RenderedPair:
    """Supervision tuple: two views, view-1 depth, the relative pose."""

    i1: FeatureMap
    i2: FeatureMap
    d_star: np.ndarray
    t_star: SE3Pose
    occlusion: np.ndarray  # uint8, 255 where view 2 sees the view-1 point
    consistency_rms: float
    visibility: float


def _quantize(img: np.ndarray) -> np.ndarray:
    """8-bit quantization, matching what a PNG round-trip will deliver."""
    return np.clip(np.rint(img * 255.0), 0, 255) / 255.0


def render_pair(scene: Scene, t_star: SE3Pose, min_visibility: float = 0.5) -> RenderedPair:
    k = scene.intrinsics
    i1 = _quantize(render_view(scene, None))
    i2 = _quantize(render_view(scene, t_star))
    d_star = render_depth(scene)

    # View-2 locations of every view-1 surface point.
    dirs1 = _ray_dirs(
        np.stack(np.meshgrid(np.arange(k.width, dtype=np.float64),
                             np.arange(k.height, dtype=np.float64)), axis=-1), k)
    p1 = d_star[..., None] * dirs1
    p2 = p1 @ t_star.rotation.T + t_star.translation
    z2 = p2[..., 2]
    in_front = z2 > _EPSILON_DIR_Z
    z2_safe = np.where(in_front, z2, 1.0)
    u2 = k.fx * p2[..., 0] / z2_safe + k.cx
    v2 = k.fy * p2[..., 1] / z2_safe + k.cy
    in_bounds = (
        in_front
        & (u2 >= 0.0) & (u2 <= k.width - 1.0)
        & (v2 >= 0.0) & (v2 <= k.height - 1.0)
    )

    # Occlusion: march the view-2 ray toward each point; a nearer surface
    # hit means something else covers it.
    r_inv = t_star.rotation.T
    origin2 = -r_inv @ t_star.translation
    d2 = np.empty_like(p2)
    d2[..., 0] = (u2 - k.cx) / k.fx
    d2[..., 1] = (v2 - k.cy) / k.fy
    d2[..., 2] = 1.0
    s_hit, hit_ok = _intersect(scene, origin2, d2 @ t_star.rotation)
    unoccluded = hit_ok & (np.where(hit_ok, s_hit, 0.0) >= z2 * (1.0 - _OCCLUSION_TOL))
    visible = in_bounds & unoccluded
    visibility = float(np.mean(visible))
    if visibility < min_visibility:
        raise InfeasiblePoseError(
            f"only {visibility:.1%} of the reference view stays visible"
        )

    coords = np.stack([u2[visible], v2[visible]], axis=1)
    sampled, ok = bilinear_many(i2[..., None], coords)
    diff = i1[visible][ok] - sampled[ok, 0]
    rms = float(np.sqrt(np.mean(diff**2))) if diff.size else 0.0

    return RenderedPair(
        i1=FeatureMap(i1[..., None].astype(np.float32)),
        i2=FeatureMap(i2[..., None].astype(np.float32)),
        d_star=d_star,
        t_star=t_star,
        occlusion=np.where(visible, 255, 0).astype(np.uint8),
        consistency_rms=rms,
        visibility=visibility,
    )


def consistency_threshold(i1: np.ndarray) -> float:
    """2% of the image's dynamic range, the pair-fitness bound."""
    return 0.02 * float(i1.max() - i1.min())


def perturb_pose(
    t_star: SE3Pose,
    rot_range_deg: float,
    trans_fraction: float,
    mean_depth: float,
    rng: np.random.Generator,
) -> SE3Pose:
    """Left-compose a random offset: per-axis uniform rotation, uniform
    translation direction with norm exactly trans_fraction * mean_depth."""
    if rot_range_deg < 0 or trans_fraction < 0:
        raise DimensionError("perturbation ranges must be nonnegative")
    omega = np.radians(rng.uniform(-rot_range_deg, rot_range_deg, size=3))
    direction = rng.standard_normal(3)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
    rotation = se3_exp(Twist(omega, np.zeros(3))).rotation
    offset = SE3Pose(rotation, direction * (trans_fraction * mean_depth))
    return compose(offset, t_star)


# Baseline schedule for dataset pair poses: (rotation deg, translation as a
# fraction of base depth) per pair index within a scene.
DATASET_BASELINES = ((3.0, 0.05), (6.0, 0.05), (3.0, 0.10), (6.0, 0.10))

_MAX_POSE_ATTEMPTS = 25


def _render_dataset_pair(
    scene: Scene, seed: int, scene_idx: int, baseline_idx: int
) -> tuple[RenderedPair, int]:
    """Draw baseline poses until one passes visibility and consistency."""
    rot_deg, trans_frac = DATASET_BASELINES[baseline_idx % len(DATASET_BASELINES)]
    rejections = 0
    for attempt in range(_MAX_POSE_ATTEMPTS):
        rng = stream_rng(seed, "dataset", scene_idx, baseline_idx, attempt)
        t_star = perturb_pose(
            SE3Pose.identity(), rot_deg, trans_frac, scene.params.base_depth, rng
        )
        try:
            pair = render_pair(scene, t_star)
        except InfeasiblePoseError:
            rejections += 1
            continue
        if pair.consistency_rms >= consistency_threshold(pair.i1.data[:, :, 0]):
            rejections += 1
            continue
        return pair, rejections
    raise InfeasiblePoseError(
        f"no feasible pose for scene {scene_idx} baseline {baseline_idx} "
        f"after {_MAX_POSE_ATTEMPTS} attempts"
    )


def generate_dataset(
    output_dir: str | Path,
    n_scenes: int,
    seed: int,
    params: SceneParams = SceneParams(),
) -> tuple[dict, int]:
    """Render n_scenes x len(DATASET_BASELINES) pairs under output_dir.

    Returns (manifest, total pose rejections).  Layout: manifest.json plus
    one directory per pair holding i1.png, i2.png, depth.pfm, occlusion.pgm.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    total_rejections = 0
    for scene_idx in range(n_scenes):
        scene_seed = int(stream_key(seed, "scene", scene_idx)[0] >> np.uint64(1))
        scene = generate_scene(scene_seed, params)
        for baseline_idx in range(len(DATASET_BASELINES)):
            pair, rejections = _render_dataset_pair(
                scene, seed, scene_idx, baseline_idx
            )
            total_rejections += rejections
            pair_id = f"pair{scene_idx * len(DATASET_BASELINES) + baseline_idx:04d}"
            pair_dir = out / pair_id
            pair_dir.mkdir(exist_ok=True)
            save_png(pair.i1, pair_dir / "i1.png")
            save_png(pair.i2, pair_dir / "i2.png")
            save_pfm(pair.d_star.astype(np.float32), pair_dir / "depth.pfm")
            save_pgm(pair.occlusion, pair_dir / "occlusion.pgm")
            entries.append({
                "id": pair_id,
                "seed": scene_seed,
                "K": scene.intrinsics.to_json(),
                "T_star": [float(x) for x in pair.t_star.matrix().reshape(-1)],
                "paths": {
                    "i1": f"{pair_id}/i1.png",
                    "i2": f"{pair_id}/i2.png",
                    "depth": f"{pair_id}/depth.pfm",
                    "occlusion": f"{pair_id}/occlusion.pgm",
                },
            })
    manifest = {
        "schema_version": 1,
        "seed": int(seed),
        "params": params.to_json(),
        "pairs": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest, total_rejections


@dataclass(frozen=True)
class DatasetPair:
    """One manifest entry, loaded."""

    pair_id: str
    i1: FeatureMap
    i2: FeatureMap
    d_star: np.ndarray
    t_star: SE3Pose
    intrinsics: CameraIntrinsics
    occlusion: np.ndarray

    @property
    def mean_depth(self) -> float:
        return float(np.mean(self.d_star))


def load_manifest(dataset_dir: str | Path) -> dict:
    with open(Path(dataset_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_pair(dataset_dir: str | Path, entry: dict) -> DatasetPair:
    root = Path(dataset_dir)
    t = np.asarray(entry["T_star"], dtype=np.float64).reshape(4, 4)
    return DatasetPair(
        pair_id=entry["id"],
        i1=load_png(root / entry["paths"]["i1"]),
        i2=load_png(root / entry["paths"]["i2"]),
        d_star=load_pfm(root / entry["paths"]["depth"]).astype(np.float64),
        t_star=SE3Pose.from_matrix(t),
        intrinsics=CameraIntrinsics.from_json(entry["K"]),
        occlusion=load_pgm(root / entry["paths"]["occlusion"]),
    )
