"""Training: losses on tape, the unrolled damped solver, and Adam.

The trainable pieces are the feature extractor and, optionally, the
Jacobian prediction network at the coarsest level.  Each training step
records the feature forward pass and a fixed number of solver iterations
on a Tape; gradients reach the parameters through the residuals, the
Jacobian entries, and the factorized linear solve.  The damping stays
fixed inside the unroll - accept/reject is control flow the tape cannot
differentiate - while test-time solves keep the full schedule.

All persistent training state (parameters and Adam moments) lives in
float32, the checkpoint container's storage dtype, so a resumed run
replays bit for bit.  Pose and warp arithmetic on the tape promotes to
float64 through numpy's usual rules.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .depth_basis import DepthBasis, build_basis, decode_depth, depth_jacobian
from .errors import DimensionError, DivergedError
from .features import FeatureExtractorParams
from .geometry import EPSILON_Z, CameraIntrinsics, SE3Pose, warp_many
from .image import FeatureMap, pixel_grid
from .image_io import load_checkpoint, save_checkpoint
from .providers import JPN_BLOCKS, LearnedJacobianParams, LearnedProvider, NumericalProvider
from .residual import AlignmentProblem
from .solver import LMConfig, _level_bases, _level_intrinsics, solve_level
from .streams import stream_rng
from .synth import DatasetPair, perturb_pose

# Test-time pose initialization inside training mirrors the ablation
# schedule: five fixed iterations per already-trained level.
_POSE_INIT_ITERATIONS = 5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    unrolled_iterations: int = 3
    bootstrap_fraction: float = 0.3
    loss_weight_lambda: float = 1.0
    batch_size: int = 4
    epochs: int = 20  # per level phase
    seed: int = 0
    lm_lambda: float = 1e-2  # fixed damping inside the unroll
    max_pixels: int = 512  # per-sample residual subsample cap
    learned_jacobian: bool = False  # train the JPN at the coarsest level

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.lm_lambda <= 0:
            raise DimensionError("rates must be positive")
        if self.unrolled_iterations < 1:
            raise DimensionError("unrolled_iterations must be >= 1")
        if not 0.0 <= self.bootstrap_fraction <= 1.0:
            raise DimensionError("bootstrap_fraction must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.max_pixels < 1:
            raise DimensionError("epochs, batch_size, max_pixels must be positive")


@dataclass(frozen=True)
class TrainSample:
    """One supervised pair: images, truth, basis, and a perturbed start."""

    i1: FeatureMap
    i2: FeatureMap
    t_star: SE3Pose
    d_star: np.ndarray  # (H, W) ground-truth depth
    basis: DepthBasis
    intrinsics: CameraIntrinsics
    t0: SE3Pose

    def __post_init__(self) -> None:
        if self.i1.data.shape != self.i2.data.shape:
            raise DimensionError("sample images must share a shape")
        if self.d_star.shape != (self.i1.height, self.i1.width):
            raise DimensionError("depth map does not match the images")
        decoded = decode_depth(self.basis.w_star, self.basis)
        if not np.allclose(decoded, self.d_star, rtol=0, atol=1e-9):
            raise DimensionError("basis prior does not reproduce the sample depth")


def make_train_sample(
    pair: DatasetPair,
    rng: np.random.Generator,
    rot_range_deg: float = 10.0,
    trans_fraction: float = 0.1,
    n_modes: int = 8,
) -> TrainSample:
    """Build a sample from a rendered pair.

    The supervision depth is the basis reconstruction of the rendered
    depth, so the sample invariant (decode at the prior reproduces D*)
    holds exactly and the depth terms supervise what the solver can
    actually represent.
    """
    basis = build_basis(pair.d_star, n=n_modes)
    d_star = decode_depth(basis.w_star, basis)
    t0 = perturb_pose(
        pair.t_star, rot_range_deg, trans_fraction, float(np.mean(d_star)), rng
    )
    return TrainSample(pair.i1, pair.i2, pair.t_star, d_star, basis, pair.intrinsics, t0)


# ---------------------------------------------------------------------------
# Model container and checkpoints


@dataclass
class ModelState:
    """Feature extractor plus the optional Jacobian network."""

    fln: FeatureExtractorParams
    jpn: LearnedJacobianParams | None = None

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {f"fln.{k}": v for k, v in self.fln.tensors.items()}
        if self.jpn is not None:
            out.update({f"jpn.{k}": v for k, v in self.jpn.tensors.items()})
        return out

    @staticmethod
    def initialize(
        level_channels: tuple[int, ...],
        seed: int,
        learned_jacobian: bool,
        in_channels: int = 1,
    ) -> "ModelState":
        fln = FeatureExtractorParams.initialize(level_channels, in_channels, seed)
        jpn = (
            LearnedJacobianParams.initialize(level_channels[0], seed)
            if learned_jacobian
            else None
        )
        return ModelState(fln, jpn)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def initialize(tensors: dict[str, np.ndarray], names: list[str]) -> "AdamState":
        return AdamState(
            m={n: np.zeros_like(tensors[n]) for n in names},
            v={n: np.zeros_like(tensors[n]) for n in names},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """Standard bias-corrected Adam, in place, float32 throughout."""
    state.step += 1
    t = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        g = grads[name].astype(tensors[name].dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        tensors[name] -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def save_training_checkpoint(
    path: str | Path,
    model: ModelState,
    adam: AdamState | None = None,
    phase_index: int = 0,
    epoch_in_phase: int = 0,
) -> None:
    tensors = {f"param.{k}": v for k, v in model.named_tensors().items()}
    if adam is not None:
        tensors.update({f"adam.m.{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in adam.v.items()})
        tensors["meta.adam_step"] = np.array([adam.step], dtype=np.float32)
    tensors["meta.counters"] = np.array([phase_index, epoch_in_phase], dtype=np.float32)
    tensors["meta.level_channels"] = np.array(model.fln.level_channels, dtype=np.float32)
    tensors["meta.in_channels"] = np.array([model.fln.in_channels], dtype=np.float32)
    tensors["meta.jpn_channels"] = np.array(
        [model.jpn.feature_channels if model.jpn is not None else 0], dtype=np.float32
    )
    save_checkpoint(tensors, path)


def load_model(path: str | Path) -> ModelState:
    """Model tensors only; optimizer state, if present, is ignored."""
    tensors = load_checkpoint(path)
    level_channels = tuple(int(c) for c in tensors["meta.level_channels"])
    in_channels = int(tensors["meta.in_channels"][0])
    fln_tensors = {
        k[len("param.fln.") :]: v for k, v in tensors.items() if k.startswith("param.fln.")
    }
    fln = FeatureExtractorParams(level_channels, in_channels, fln_tensors)
    jpn = None
    jpn_channels = int(tensors["meta.jpn_channels"][0])
    if jpn_channels > 0:
        jpn_tensors = {
            k[len("param.jpn.") :]: v
            for k, v in tensors.items()
            if k.startswith("param.jpn.")
        }
        jpn = LearnedJacobianParams(jpn_channels, jpn_tensors)
    return ModelState(fln, jpn)


def load_training_checkpoint(path: str | Path) -> tuple[ModelState, AdamState | None, int, int]:
    tensors = load_checkpoint(path)
    model = load_model(path)
    phase_index, epoch_in_phase = (int(x) for x in tensors["meta.counters"])
    adam = None
    if "meta.adam_step" in tensors:
        adam = AdamState(
            m={k[len("adam.m.") :]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            v={k[len("adam.v.") :]: v for k, v in tensors.items() if k.startswith("adam.v.")},
            step=int(tensors["meta.adam_step"][0]),
        )
    return model, adam, phase_index, epoch_in_phase


# ---------------------------------------------------------------------------
# Forward passes on tape


def _param_vars(
    tape: Tape, model: ModelState, active: set[str] | None
) -> dict[str, Var]:
    """Model tensors as Vars; inactive ones stay off the tape.

    A frozen subtree whose inputs are all constants records nothing, so
    later phases pay nothing for the encoder they no longer train.
    """
    out = {}
    for name, data in model.named_tensors().items():
        taped = active is None or name in active
        out[name] = tape.var(data) if taped else Var(data, None)
    return out


def _conv_block_tape(x: Var, pv: dict[str, Var], prefix: str) -> Var:
    x = ad.relu(ad.conv2d(x, pv[f"{prefix}.c1.w"], pv[f"{prefix}.c1.b"], pad=1))
    return ad.relu(ad.conv2d(x, pv[f"{prefix}.c2.w"], pv[f"{prefix}.c2.b"], pad=1))


def extract_levels_tape(
    image_chw: Var, pv: dict[str, Var], levels: int, upto: int
) -> list[Var]:
    """Feature levels 0..upto (coarsest first) as (C, H, W) Vars.

    Mirrors the inference extractor: encoder blocks finest first with a
    Gaussian halving between, then decoder blocks merging upsampled output
    with the skip at each finer level.
    """
    x = image_chw
    skips: dict[int, Var] = {}
    for k in range(levels - 1, -1, -1):
        x = _conv_block_tape(x, pv, f"fln.enc{k}")
        skips[k] = x
        if k > 0:
            x = ad.gauss_downsample(x)
    out = [skips[0]]
    cur = skips[0]
    for k in range(1, upto + 1):
        merged = ad.concat([ad.upsample2(cur), skips[k]], axis=0)
        cur = _conv_block_tape(merged, pv, f"fln.dec{k}")
        out.append(cur)
    return out


def jpn_forward_tape(x: Var, pv: dict[str, Var]) -> Var:
    h = ad.relu(ad.conv2d(x, pv["jpn.stem.w"], pv["jpn.stem.b"], pad=0))
    for i in range(JPN_BLOCKS):
        inner = ad.relu(ad.conv2d(h, pv[f"jpn.res{i}.c1.w"], pv[f"jpn.res{i}.c1.b"], pad=1))
        h = ad.add(h, ad.conv2d(inner, pv[f"jpn.res{i}.c2.w"], pv[f"jpn.res{i}.c2.b"], pad=1))
    return ad.conv2d(h, pv["jpn.head.w"], pv["jpn.head.b"], pad=0)


def _column(m: Var, j: int) -> Var:
    """One column of an (M, K) Var as (M, 1)."""
    sel = np.zeros((m.data.shape[1], 1))
    sel[j, 0] = 1.0
    return ad.matmul(m, Var(sel, None))


def _rays(pix: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    rays = np.empty((pix.shape[0], 3), dtype=np.float64)
    rays[:, 0] = (pix[:, 0] - intrinsics.cx) / intrinsics.fx
    rays[:, 1] = (pix[:, 1] - intrinsics.cy) / intrinsics.fy
    rays[:, 2] = 1.0
    return rays


def _warp_tape(
    rot: Var,
    trans: Var,
    rays: np.ndarray,
    depth: Var,
    intrinsics: CameraIntrinsics,
) -> tuple[Var, Var, Var, np.ndarray]:
    """Warp on tape: returns (coords (M,2), p2 (M,3), z_safe (M,1), in_front).

    Rows behind the camera get z pinned to 1 so no NaN enters the graph;
    every consumer masks those rows out.
    """
    p1 = ad.mul(Var(rays, None), ad.reshape(depth, (rays.shape[0], 1)))
    p2 = ad.add(ad.matmul(p1, ad.transpose(rot, (1, 0))), trans)
    z = _column(p2, 2)
    in_front = z.data[:, 0] > EPSILON_Z
    front = in_front.astype(np.float64)[:, None]
    z_safe = ad.add(ad.mul(z, Var(front, None)), Var(1.0 - front, None))
    # mul before div, matching the plain warp bit for bit on valid rows
    u = ad.div(_column(p2, 0) * intrinsics.fx, z_safe) + intrinsics.cx
    v = ad.div(_column(p2, 1) * intrinsics.fy, z_safe) + intrinsics.cy
    coords = ad.concat([u, v], axis=1)
    return coords, p2, z_safe, in_front


def _projection_rows_tape(p2: Var, z_safe: Var, intrinsics: CameraIntrinsics) -> Var:
    """d(coords)/d(point) rows, (M, 2, 3) on tape."""
    m = p2.data.shape[0]
    zeros = Var(np.zeros((m, 1)), None)
    z_sq = ad.square(z_safe)
    p11 = ad.div(Var(np.full((m, 1), intrinsics.fx), None), z_safe)
    p13 = ad.neg(ad.div(_column(p2, 0) * intrinsics.fx, z_sq))
    p22 = ad.div(Var(np.full((m, 1), intrinsics.fy), None), z_safe)
    p23 = ad.neg(ad.div(_column(p2, 1) * intrinsics.fy, z_sq))
    return ad.reshape(ad.concat([p11, zeros, p13, zeros, p22, p23], axis=1), (m, 2, 3))


def _pose_jacobian_tape(p2: Var, proj: Var) -> Var:
    """d(coords)/d(twist) for a left update, (M, 2, 6) on tape.

    The update moves the transformed point: d p2 / d omega = -[p2]x and
    the identity for nu, projected through the pinhole rows.
    """
    m = p2.data.shape[0]
    skew_flat = ad.matmul(p2, Var(ad._SKEW_EMBED.T, None))
    skew = ad.reshape(skew_flat, (m, 3, 3))
    eye = Var(np.broadcast_to(np.eye(3), (m, 3, 3)).copy(), None)
    body = ad.concat([ad.neg(skew), eye], axis=2)
    return ad.matmul(proj, body)


def _decode_pixels_tape(w: Var, basis: DepthBasis, pix: np.ndarray) -> Var:
    """Decoded depth at integer pixels, (M,), relu kink at zero."""
    cols = basis.maps[:, pix[:, 1], pix[:, 0]]  # (N, M)
    pre = ad.reshape(ad.matmul(ad.reshape(w, (1, basis.n)), Var(cols, None)), (pix.shape[0],))
    return ad.relu(pre)


def _decode_map_tape(w: Var, basis: DepthBasis) -> Var:
    flat = basis.maps.reshape(basis.n, -1)
    pre = ad.reshape(ad.matmul(ad.reshape(w, (1, basis.n)), Var(flat, None)), (flat.shape[1],))
    return ad.relu(pre)


def _mask_rows(x: Var, mask: np.ndarray) -> Var:
    shape = (mask.shape[0],) + (1,) * (x.data.ndim - 1)
    return ad.mul(x, Var(mask.astype(np.float64).reshape(shape), None))


# ---------------------------------------------------------------------------
# Unrolled solver


@dataclass
class UnrolledSolveResult:
    """Final pose/weights as tape Vars plus everything a loss needs."""

    tape: Tape
    rot: Var
    trans: Var
    w: Var
    param_vars: dict[str, Var]
    pixel_set: np.ndarray
    intrinsics: CameraIntrinsics
    basis: DepthBasis
    level: int

    @property
    def pose(self) -> SE3Pose:
        return SE3Pose(self.rot.data.copy(), self.trans.data.copy())

    @property
    def w_out(self) -> np.ndarray:
        return np.array(self.w.data, dtype=np.float64)


def _gather_pixels(fmap_hwc: Var, flat_idx: np.ndarray) -> Var:
    h, w, c = fmap_hwc.data.shape
    return ad.gather_rows(ad.reshape(fmap_hwc, (h * w, c)), flat_idx)


def _residual_and_jacobian_tape(
    f1: Var,
    f2: Var,
    grad_u: Var,
    grad_v: Var,
    rot: Var,
    trans: Var,
    w: Var,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
    pix: np.ndarray,
    rays: np.ndarray,
    optimize_depth: bool,
    jpn_vars: dict[str, Var] | None,
) -> tuple[Var, Var, np.ndarray]:
    """One linearization on tape: (r (M*C,1), J (M*C,P), valid mask).

    Feature maps arrive as (H, W, C) Vars.  With a Jacobian network the
    pose block comes from its prediction on [f1, warped f2, validity] over
    the full grid; otherwise it is the sampled-gradient chain.  Depth
    columns are always the numerical chain.
    """
    m = pix.shape[0]
    c = f1.data.shape[2]
    height, width = f1.data.shape[0], f1.data.shape[1]
    flat = pix[:, 1] * width + pix[:, 0]

    if jpn_vars is None:
        d_pix = _decode_pixels_tape(w, basis, pix)
        coords, p2, z_safe, in_front = _warp_tape(rot, trans, rays, d_pix, intrinsics)
        f2_s, sample_ok = ad.bilinear(f2, coords)
        valid = (d_pix.data > EPSILON_Z) & in_front & sample_ok
        gu_s, _ = ad.bilinear(grad_u, coords)
        gv_s, _ = ad.bilinear(grad_v, coords)
        g = ad.concat(
            [ad.reshape(gu_s, (m, c, 1)), ad.reshape(gv_s, (m, c, 1))], axis=2
        )
        proj = _projection_rows_tape(p2, z_safe, intrinsics)
        jw = _pose_jacobian_tape(p2, proj)
        pose_block = ad.matmul(g, jw)  # (M, C, 6)
    else:
        # Full-grid warp feeds the network exactly as at inference.
        grid = pixel_grid(width, height).astype(np.int64)
        d_grid = _decode_pixels_tape(w, basis, grid)
        grid_rays = _rays(grid.astype(np.float64), intrinsics)
        coords_g, p2, z_safe, front_g = _warp_tape(rot, trans, grid_rays, d_grid, intrinsics)
        f2bar, ok_g = ad.bilinear(f2, coords_g)
        valid_g = (d_grid.data > EPSILON_Z) & front_g & ok_g
        f2bar = _mask_rows(f2bar, valid_g)
        net_in = ad.concat(
            [
                ad.transpose(f1, (2, 0, 1)),
                ad.transpose(ad.reshape(f2bar, (height, width, c)), (2, 0, 1)),
                Var(valid_g.reshape(1, height, width).astype(np.float64), None),
            ],
            axis=0,
        )
        pred = jpn_forward_tape(net_in, jpn_vars)  # (6C, H, W)
        pred_rows = ad.gather_rows(
            ad.reshape(ad.transpose(pred, (1, 2, 0)), (height * width, 6 * c)), flat
        )
        pose_block = ad.reshape(pred_rows, (m, c, 6))
        f2_s = ad.gather_rows(f2bar, flat)
        valid = valid_g[flat]
        coords = ad.gather_rows(coords_g, flat)
        p2 = ad.gather_rows(p2, flat)
        z_safe = ad.gather_rows(z_safe, flat)
        g = None

    f1_s = _gather_pixels(f1, flat)
    r = _mask_rows(ad.sub(f1_s, f2_s), valid)

    if optimize_depth:
        if g is None:
            gu_s, _ = ad.bilinear(grad_u, coords)
            gv_s, _ = ad.bilinear(grad_v, coords)
            g = ad.concat(
                [ad.reshape(gu_s, (m, c, 1)), ad.reshape(gv_s, (m, c, 1))], axis=2
            )
        proj = _projection_rows_tape(p2, z_safe, intrinsics)
        dp2_dd = ad.matmul(Var(rays, None), ad.transpose(rot, (1, 0)))  # (M, 3)
        jd = ad.matmul(proj, ad.reshape(dp2_dd, (m, 3, 1)))  # (M, 2, 1)
        gd = ad.matmul(g, jd)  # (M, C, 1)
        ddw = depth_jacobian(np.asarray(w.data, dtype=np.float64), basis, pix)
        depth_block = ad.mul(gd, Var(ddw[:, None, :], None))
        entries = ad.concat([pose_block, depth_block], axis=2)
    else:
        entries = pose_block

    entries = _mask_rows(ad.neg(entries), valid)
    p = 6 + (basis.n if optimize_depth else 0)
    return ad.reshape(r, (m * c, 1)), ad.reshape(entries, (m * c, p)), valid


def _unrolled_core(
    tape: Tape,
    param_vars: dict[str, Var],
    f1_lv: Var,
    f2_lv: Var,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
    t0: SE3Pose,
    w0: np.ndarray,
    pix: np.ndarray,
    n_iter: int,
    lm_lambda: float,
    optimize_depth: bool,
    use_learned: bool,
) -> tuple[Var, Var, Var]:
    """Fixed-damping iterations on tape from constant starts (t0, w0)."""
    f1 = ad.transpose(f1_lv, (1, 2, 0))
    f2 = ad.transpose(f2_lv, (1, 2, 0))
    grad_u, grad_v = ad.grid_gradient(f2)
    rays = _rays(pix.astype(np.float64), intrinsics)
    jpn_vars = (
        {k: v for k, v in param_vars.items() if k.startswith("jpn.")} if use_learned else None
    )

    rot = Var(t0.rotation.copy(), None)
    trans = Var(t0.translation.copy(), None)
    w = Var(np.asarray(w0, dtype=np.float64).copy(), None)
    p = 6 + (basis.n if optimize_depth else 0)
    lam_eye = Var(lm_lambda * np.eye(p), None)

    for _ in range(n_iter):
        r, jac, _ = _residual_and_jacobian_tape(
            f1, f2, grad_u, grad_v, rot, trans, w, basis, intrinsics,
            pix, rays, optimize_depth, jpn_vars,
        )
        jt = ad.transpose(jac, (1, 0))
        a = ad.add(ad.matmul(jt, jac), lam_eye)
        b = ad.matmul(jt, r)
        delta = ad.cho_solve_sym(a, b)
        step = ad.reshape(ad.neg(delta), (p,))
        rot_step, trans_step = ad.se3_exp_tape(tape, ad.gather_rows(step, np.arange(6)))
        trans = ad.add(
            ad.reshape(ad.matmul(rot_step, ad.reshape(trans, (3, 1))), (3,)), trans_step
        )
        rot = ad.matmul(rot_step, rot)
        if optimize_depth:
            w = ad.add(w, ad.gather_rows(step, np.arange(6, p)))
    return rot, trans, w


def unrolled_solve(
    sample: TrainSample,
    model: ModelState,
    config: TrainConfig,
    level: int = 0,
    init_pose: SE3Pose | None = None,
    w0: np.ndarray | None = None,
    pixel_set: np.ndarray | None = None,
    optimize_depth: bool = False,
    use_learned: bool | None = None,
    active: set[str] | None = None,
) -> UnrolledSolveResult:
    """Record n unrolled iterations at one pyramid level on a fresh Tape.

    Starts from the sample's perturbed pose (or init_pose) and the basis
    prior (or w0); returns the final pose and weights as Vars so a loss
    built on top backpropagates into every active parameter.
    """
    if use_learned is None:
        use_learned = config.learned_jacobian
    if use_learned and (model.jpn is None or level != 0):
        raise DimensionError("learned Jacobian training needs a JPN at the coarsest level")
    n = model.fln.levels
    if not 0 <= level < n:
        raise DimensionError(f"level {level} out of range for {n}-level extractor")
    tape = Tape()
    pv = _param_vars(tape, model, active)
    i1 = Var(np.ascontiguousarray(sample.i1.data.transpose(2, 0, 1)), None)
    i2 = Var(np.ascontiguousarray(sample.i2.data.transpose(2, 0, 1)), None)
    f1_lv = extract_levels_tape(i1, pv, n, level)[level]
    f2_lv = extract_levels_tape(i2, pv, n, level)[level]
    intr = _level_intrinsics(sample.intrinsics, n)[level]
    basis = _level_bases(sample.basis, n)[level]
    if pixel_set is None:
        pixel_set = pixel_grid(intr.width, intr.height).astype(np.int64)
    t0 = init_pose if init_pose is not None else sample.t0
    start_w = np.asarray(w0, dtype=np.float64) if w0 is not None else basis.w_star
    rot, trans, w = _unrolled_core(
        tape, pv, f1_lv, f2_lv, basis, intr, t0, start_w, pixel_set,
        config.unrolled_iterations, config.lm_lambda, optimize_depth, use_learned,
    )
    return UnrolledSolveResult(tape, rot, trans, w, pv, pixel_set, intr, basis, level)


# ---------------------------------------------------------------------------
# Losses


def _inside(coords: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    return (
        np.isfinite(coords).all(axis=1)
        & (coords[:, 0] >= 0.0)
        & (coords[:, 0] <= intrinsics.width - 1.0)
        & (coords[:, 1] >= 0.0)
        & (coords[:, 1] <= intrinsics.height - 1.0)
    )


def _reprojection_terms(
    rot: Var,
    trans: Var,
    depth: Var,
    t_star: SE3Pose,
    d_star_pix: np.ndarray,
    intrinsics: CameraIntrinsics,
    pix: np.ndarray,
) -> tuple[Var, np.ndarray, float]:
    """Mean squared pixel distance between predicted and truth warps.

    Returns (loss Var, counted mask, mean pixel distance for logging).
    Pixels invalid under either warp - behind a camera, outside the grid,
    or without positive depth - are excluded from the mean.
    """
    pixf = pix.astype(np.float64)
    target, _, front_t = warp_many(pixf, d_star_pix, t_star, intrinsics)
    valid_t = front_t & (d_star_pix > EPSILON_Z) & _inside(target, intrinsics)

    rays = _rays(pixf, intrinsics)
    coords, _, _, front_p = _warp_tape(rot, trans, rays, depth, intrinsics)
    valid_p = front_p & (depth.data > EPSILON_Z) & _inside(coords.data, intrinsics)

    counted = valid_t & valid_p
    n = int(counted.sum())
    if n == 0:
        raise DivergedError("no pixel is valid under both warps")
    diff = _mask_rows(ad.sub(coords, Var(np.where(valid_t[:, None], target, 0.0), None)), counted)
    loss = ad.mul(ad.sum_all(ad.square(diff)), Var(np.float64(1.0 / n), None))
    dist = np.sqrt(((coords.data - target) ** 2).sum(axis=1)[counted])
    return loss, counted, float(dist.mean())


def reprojection_loss(
    pose: SE3Pose,
    w: np.ndarray,
    basis: DepthBasis,
    t_star: SE3Pose,
    d_star: np.ndarray,
    intrinsics: CameraIntrinsics,
    pixel_set: np.ndarray | None = None,
) -> float:
    """Plain-number variant over decoded depth at w and truth depth d_star."""
    if pixel_set is None:
        pixel_set = pixel_grid(intrinsics.width, intrinsics.height).astype(np.int64)
    depth_map = decode_depth(w, basis)
    depth = Var(depth_map[pixel_set[:, 1], pixel_set[:, 0]], None)
    d_star_pix = d_star[pixel_set[:, 1], pixel_set[:, 0]].astype(np.float64)
    loss, _, _ = _reprojection_terms(
        Var(pose.rotation, None), Var(pose.translation, None),
        depth, t_star, d_star_pix, intrinsics, pixel_set,
    )
    return float(loss.data)


def bootstrap_loss(value):
    """log(L + 1); tape inputs keep the 1/(L+1) backward attenuation."""
    if isinstance(value, Var):
        return ad.log1p(value)
    if value < 0:
        raise DimensionError("bootstrap loss needs a nonnegative input")
    return math.log1p(value)


def _berhu_pieces(e: np.ndarray, supervised: np.ndarray) -> tuple[float, np.ndarray, int]:
    n_sup = int(supervised.sum())
    c = 0.2 * float(np.abs(e[supervised]).max()) if n_sup else 0.0
    small = np.abs(e) <= c
    return c, small, n_sup


def berhu(d: np.ndarray, d_star: np.ndarray) -> float:
    """Reverse-Huber depth penalty, threshold 0.2 of the worst error.

    |e| up to the threshold, quadratic beyond, averaged over supervised
    (positive-truth) pixels.
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    d_star = np.asarray(d_star, dtype=np.float64).reshape(-1)
    if d.shape != d_star.shape:
        raise DimensionError("depth maps must share a shape")
    supervised = d_star > 0
    e = d - d_star
    c, small, n_sup = _berhu_pieces(e, supervised)
    if n_sup == 0 or c == 0.0:
        return 0.0
    vals = np.where(small, np.abs(e), (e * e + c * c) / (2.0 * c))
    return float(vals[supervised].mean())


def berhu_tape(d: Var, d_star: np.ndarray) -> Var:
    """Tape variant; the threshold is a stopped-gradient statistic."""
    d_star = np.asarray(d_star, dtype=np.float64).reshape(-1)
    supervised = d_star > 0
    e = ad.sub(ad.reshape(d, (d_star.shape[0],)), Var(d_star, None))
    c, small, n_sup = _berhu_pieces(e.data, supervised)
    if n_sup == 0 or c == 0.0:
        return Var(np.float64(0.0), None)
    w_small = (small & supervised).astype(np.float64)
    w_large = (~small & supervised).astype(np.float64)
    lin = ad.mul(ad.absolute(e), Var(w_small, None))
    quad = ad.mul(
        ad.mul(ad.add(ad.square(e), Var(np.float64(c * c), None)), Var(w_large, None)),
        Var(np.float64(1.0 / (2.0 * c)), None),
    )
    return ad.mul(ad.sum_all(ad.add(lin, quad)), Var(np.float64(1.0 / n_sup), None))


def combined_cost(loss, d1, d0, d_star, lambda_loss: float):
    """lambda * reprojection plus depth penalties at the final and the
    initial weights.  The initial-weights penalty carries no parameter
    dependence and enters as a constant."""
    d0_term = berhu(np.asarray(d0), d_star)
    if isinstance(loss, Var) or isinstance(d1, Var):
        scaled = (
            ad.mul(loss, Var(np.float64(lambda_loss), None))
            if isinstance(loss, Var)
            else Var(np.float64(lambda_loss * loss), None)
        )
        d1_term = (
            berhu_tape(d1, d_star)
            if isinstance(d1, Var)
            else Var(np.float64(berhu(d1, d_star)), None)
        )
        return ad.add(ad.add(scaled, d1_term), Var(np.float64(d0_term), None))
    return lambda_loss * loss + berhu(d1, d_star) + d0_term


# ---------------------------------------------------------------------------
# Training loop


def _phase_active(model: ModelState, config: TrainConfig, phase: int) -> set[str]:
    names = set()
    for name in model.named_tensors():
        if phase == 0:
            if name.startswith("fln.enc"):
                names.add(name)
            elif config.learned_jacobian and name.startswith("jpn."):
                names.add(name)
        elif name.startswith(f"fln.dec{phase}."):
            names.add(name)
    return names


def _pose_init(
    sample: TrainSample,
    model: ModelState,
    config: TrainConfig,
    levels1: list[Var],
    levels2: list[Var],
    upto: int,
) -> SE3Pose:
    """Frozen inference solves of the already-trained levels below `upto`."""
    if upto == 0:
        return sample.t0
    n = model.fln.levels
    intr = _level_intrinsics(sample.intrinsics, n)
    bases = _level_bases(sample.basis, n)
    lm = LMConfig(
        lambda_init=config.lm_lambda,
        max_iterations=_POSE_INIT_ITERATIONS,
        fixed_iteration_mode=True,
    )
    pose = sample.t0
    for lv in range(upto):
        problem = AlignmentProblem.build(
            FeatureMap(np.ascontiguousarray(levels1[lv].data.transpose(1, 2, 0))),
            FeatureMap(np.ascontiguousarray(levels2[lv].data.transpose(1, 2, 0))),
            intr[lv],
            bases[lv],
            optimize_depth=False,
        )
        provider = (
            LearnedProvider(model.jpn)
            if lv == 0 and config.learned_jacobian and model.jpn is not None
            else NumericalProvider()
        )
        report = solve_level(problem, pose, bases[lv].w_star, provider, lm, level=lv)
        pose = report.pose
    return pose


def _train_step(
    sample: TrainSample,
    model: ModelState,
    config: TrainConfig,
    phase: int,
    epoch: int,
    index: int,
    bootstrap: bool,
) -> tuple[float, float, dict[str, np.ndarray]] | None:
    """One tape build/backward; None when the sample diverges outright."""
    n = model.fln.levels
    tape = Tape()
    active = _phase_active(model, config, phase)
    pv = _param_vars(tape, model, active)
    i1 = Var(np.ascontiguousarray(sample.i1.data.transpose(2, 0, 1)), None)
    i2 = Var(np.ascontiguousarray(sample.i2.data.transpose(2, 0, 1)), None)
    levels1 = extract_levels_tape(i1, pv, n, phase)
    levels2 = extract_levels_tape(i2, pv, n, phase)

    try:
        init = _pose_init(sample, model, config, levels1, levels2, phase)
    except DivergedError:
        return None

    intr = _level_intrinsics(sample.intrinsics, n)[phase]
    basis = _level_bases(sample.basis, n)[phase]
    grid = pixel_grid(intr.width, intr.height).astype(np.int64)
    if grid.shape[0] > config.max_pixels:
        rng = stream_rng(config.seed, "train", "pix", phase, epoch, index)
        keep = np.sort(rng.choice(grid.shape[0], size=config.max_pixels, replace=False))
        pix = grid[keep]
    else:
        pix = grid

    optimize_depth = phase == n - 1
    w0 = np.asarray(basis.w_star, dtype=np.float64)
    if optimize_depth:
        # Small per-epoch jitter so the depth columns see a correction to
        # make; too much puts a noise floor under the logged reprojection.
        rng = stream_rng(config.seed, "train", "w0", phase, epoch, index)
        sigma = 0.02 * float(np.sqrt(np.mean(w0**2)))
        w0 = w0 + rng.normal(0.0, sigma, size=w0.shape)

    use_learned = config.learned_jacobian and phase == 0
    rot, trans, w = _unrolled_core(
        tape, pv, levels1[phase], levels2[phase], basis, intr, init, w0, pix,
        config.unrolled_iterations, config.lm_lambda, optimize_depth, use_learned,
    )

    d_star_level = decode_depth(sample.basis.w_star, basis)
    d_star_pix = d_star_level[pix[:, 1], pix[:, 0]]
    depth_pix = _decode_pixels_tape(w, basis, pix)
    try:
        loss, _, mean_px = _reprojection_terms(
            rot, trans, depth_pix, sample.t_star, d_star_pix, intr, pix
        )
    except DivergedError:
        return None
    objective = bootstrap_loss(loss) if bootstrap else loss
    if optimize_depth:
        d1 = _decode_map_tape(w, basis)
        d0 = decode_depth(w0, basis)
        objective = combined_cost(
            objective, d1, d0, d_star_level, config.loss_weight_lambda
        )
    tape.backward(objective)

    grads = {}
    for name in active:
        g = pv[name].grad
        grads[name] = g if g is not None else np.zeros_like(pv[name].data)
    return float(objective.data), mean_px / intr.width, grads


def train(
    dataset: list[TrainSample],
    model: ModelState,
    config: TrainConfig,
    log_path: str | Path,
    checkpoint_path: str | Path,
    resume: bool = False,
    stop_after: int | None = None,
    progress=None,
) -> tuple[ModelState, list[dict]]:
    """Phased training: coarsest encoder (+ JPN) first, then each decoder.

    Every phase runs config.epochs epochs, the first bootstrap_fraction of
    them on log(L+1).  The finest phase optimizes depth weights in the
    unroll and adds the depth penalties.  Emits one CSV row per epoch
    (epoch, phase, mean loss, mean width-normalized reprojection) and a
    rolling checkpoint; resuming replays the remaining epochs bit for bit.
    """
    if not dataset:
        raise DimensionError("training needs at least one sample")
    if config.learned_jacobian and model.jpn is None:
        raise DimensionError("config asks for a learned Jacobian but the model has none")
    log_path, checkpoint_path = Path(log_path), Path(checkpoint_path)

    n = model.fln.levels
    n_boot = int(config.epochs * config.bootstrap_fraction)
    start_phase, start_epoch = 0, 0
    adam: AdamState | None = None
    rows: list[dict] = []
    if resume and checkpoint_path.exists():
        model, adam, start_phase, start_epoch = load_training_checkpoint(checkpoint_path)
        if start_epoch >= config.epochs:
            start_phase, start_epoch, adam = start_phase + 1, 0, None
        if log_path.exists():
            with open(log_path, newline="") as fh:
                rows = [
                    {
                        "epoch": int(r["epoch"]),
                        "phase": r["phase"],
                        "mean_loss": float(r["mean_loss"]),
                        "mean_reprojection": float(r["mean_reprojection"]),
                    }
                    for r in csv.DictReader(fh)
                ]
            rows = rows[: start_phase * config.epochs + start_epoch]

    def write_log() -> None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "phase", "mean_loss", "mean_reprojection"]
            )
            writer.writeheader()
            writer.writerows(rows)

    executed = 0
    last_label = rows[-1]["phase"] if rows else None
    for phase in range(start_phase, n):
        if adam is None:
            adam = AdamState.initialize(model.named_tensors(), sorted(_phase_active(model, config, phase)))
        for epoch in range(start_epoch, config.epochs):
            label = f"l{phase}-bootstrap" if epoch < n_boot else f"l{phase}-plain"
            if label != last_label:
                last_label = label
                if progress is not None:
                    progress(f"phase {label}")
            losses, reprojs = [], []
            batch: dict[str, np.ndarray] = {}
            batch_count = 0
            tensors = model.named_tensors()
            for index, sample in enumerate(dataset):
                step = _train_step(sample, model, config, phase, epoch, index, epoch < n_boot)
                if step is None:
                    continue
                loss_val, reproj, grads = step
                losses.append(loss_val)
                reprojs.append(reproj)
                for name, g in grads.items():
                    if name in batch:
                        batch[name] += g
                    else:
                        batch[name] = g.copy()
                batch_count += 1
                if batch_count == config.batch_size or index == len(dataset) - 1:
                    for name in batch:
                        batch[name] /= np.float32(batch_count)
                    adam_step(tensors, batch, adam, config)
                    batch, batch_count = {}, 0
            rows.append(
                {
                    "epoch": phase * config.epochs + epoch,
                    "phase": label,
                    "mean_loss": float(np.mean(losses)) if losses else math.nan,
                    "mean_reprojection": float(np.mean(reprojs)) if reprojs else math.nan,
                }
            )
            write_log()
            save_training_checkpoint(checkpoint_path, model, adam, phase, epoch + 1)
            executed += 1
            if stop_after is not None and executed >= stop_after:
                return model, rows
        start_epoch, adam = 0, None
    return model, rows
