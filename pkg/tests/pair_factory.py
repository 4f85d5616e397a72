"""Closed-form synthetic pairs for solver and training tests.

A textured plane at constant depth in camera 1, viewed from a second pose,
has an exact pixel correspondence: no renderer needed.  Both images
evaluate one analytic texture at exact continuous coordinates, so the pair
is consistent to machine precision and the only model error left is the
solver's own bilinear sampling.
"""

import numpy as np

from regalign.geometry import CameraIntrinsics, SE3Pose
from regalign.image import FeatureMap


def smooth_texture(u, v):
    return (
        0.55
        + 0.25 * np.sin(u / 4.5) * np.cos(v / 3.7)
        + 0.15 * np.sin((u + 1.3 * v) / 6.1)
        + 0.05 * np.cos((2.0 * u - v) / 9.3)
    )


def plane_pair(
    pose_star: SE3Pose,
    depth: float,
    intrinsics: CameraIntrinsics,
    texture=smooth_texture,
) -> tuple[FeatureMap, FeatureMap, np.ndarray]:
    """(I1, I2, D*) for a z = depth plane in camera 1's frame.

    I2 is rendered by intersecting each camera-2 ray with the plane and
    evaluating the texture at the camera-1 projection of the hit point.
    Camera-2 pixels whose ray misses the plane in front of the camera get
    texture value 0 (they land outside I1's frustum in practice).
    """
    w, h = intrinsics.width, intrinsics.height
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    i1 = texture(uu, vv)
    d_star = np.full((h, w), float(depth))

    r_inv = pose_star.rotation.T
    t = pose_star.translation
    rays = np.stack(
        [
            (uu - intrinsics.cx) / intrinsics.fx,
            (vv - intrinsics.cy) / intrinsics.fy,
            np.ones_like(uu),
        ],
        axis=-1,
    )  # camera-2 rays, (H, W, 3)
    dir1 = rays @ r_inv.T  # ray directions rotated into camera 1
    origin1 = -(r_inv @ t)  # camera-2 center seen from camera 1
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (depth - origin1[2]) / dir1[..., 2]
    hit = origin1[None, None, :] + s[..., None] * dir1
    u1 = intrinsics.fx * hit[..., 0] / depth + intrinsics.cx
    v1 = intrinsics.fy * hit[..., 1] / depth + intrinsics.cy
    i2 = texture(u1, v1)
    bad = ~np.isfinite(i2) | (s <= 0)
    i2 = np.where(bad, 0.0, i2)
    return FeatureMap(i1), FeatureMap(i2), d_star
