"""Levenberg-Marquardt iteration over pose and depth weights.

lm_step solves the damped normal equations exactly as stated:
delta = (J^T J + lambda I)^-1 (J^T r).  With r = f1 - f2(warp) and the
Jacobian's leading minus, that delta is an ascent direction; solve_level
therefore applies -delta.  The sign is pinned by a directional-derivative
test in the suite, not by convention.

Depth-weight columns are scaled by the mean decoded depth before
factorization and the step unscaled after, so the isotropic damping sees
pose and depth parameters at comparable magnitudes.  lm_step itself stays
literal; the equilibration is solve_level's business.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .depth_basis import DepthBasis, decode_depth, downsample_basis
from .errors import DimensionError, DivergedError, NumericalFailureError
from .geometry import CameraIntrinsics, SE3Pose, Twist, compose, se3_exp
from .image import ImagePyramid
from .residual import (
    AlignmentProblem,
    JacobianMatrix,
    ResidualVector,
    compute_residual,
    cost,
)


@dataclass(frozen=True)
class LMConfig:
    lambda_init: float = 1e-2
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    max_iterations: int = 30
    step_tolerance: float = 1e-8
    cost_tolerance: float = 1e-10
    fixed_iteration_mode: bool = False
    max_rejections: int = 8

    def __post_init__(self) -> None:
        if self.lambda_init <= 0 or self.max_iterations < 1:
            raise DimensionError("lambda_init and max_iterations must be positive")
        if not (self.lambda_up > 1.0 > self.lambda_down > 0.0):
            raise DimensionError("need lambda_up > 1 > lambda_down > 0")


@dataclass(frozen=True)
class IterationRecord:
    level: int
    index: int
    cost: float
    lam: float
    step_norm: float
    valid_fraction: float
    accepted: bool


@dataclass
class SolveReport:
    pose: SE3Pose
    w: np.ndarray
    converged: bool
    termination: str
    initial_cost: float
    final_cost: float
    trace: list[IterationRecord] = field(default_factory=list)

    def accepted_costs(self) -> list[float]:
        return [rec.cost for rec in self.trace if rec.accepted]

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "w": [float(x) for x in self.w],
            "converged": self.converged,
            "termination": self.termination,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": len(self.trace),
            "trace": [
                {
                    "level": rec.level,
                    "iteration": rec.index,
                    "cost": rec.cost,
                    "lambda": rec.lam,
                    "step_norm": rec.step_norm,
                    "valid_fraction": rec.valid_fraction,
                    "accepted": rec.accepted,
                }
                for rec in self.trace
            ],
        }

    def trace_csv(self) -> str:
        lines = ["level,iteration,cost,lambda,step_norm,valid_fraction,accepted"]
        for rec in self.trace:
            lines.append(
                f"{rec.level},{rec.index},{rec.cost:.12g},{rec.lam:.12g},"
                f"{rec.step_norm:.12g},{rec.valid_fraction:.6g},{int(rec.accepted)}"
            )
        return "\n".join(lines) + "\n"


def lm_step(jacobian: JacobianMatrix, residual: ResidualVector, lam: float) -> np.ndarray:
    """Solve (J^T J + lambda I) delta = J^T r by Cholesky factorization."""
    if lam <= 0:
        raise DimensionError("lambda must be positive")
    j = jacobian.entries
    if j.shape[0] != residual.values.shape[0]:
        raise DimensionError("jacobian rows do not match residual length")
    a = j.T @ j
    a[np.diag_indices_from(a)] += lam
    b = j.T @ residual.values
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
        return cho_solve(factor, b, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise NumericalFailureError(f"normal-equation factorization failed: {exc}") from exc


def apply_update(pose: SE3Pose, w: np.ndarray, delta: np.ndarray) -> tuple[SE3Pose, np.ndarray]:
    """Left-multiplicative pose update, additive weight update, as given."""
    if not np.isfinite(delta).all():
        raise NumericalFailureError("non-finite update")
    new_pose = compose(se3_exp(Twist.from_array(delta[:6])), pose)
    if delta.shape[0] > 6:
        return new_pose, w + delta[6:]
    return new_pose, np.array(w, dtype=np.float64)


def _column_scale(problem: AlignmentProblem, w: np.ndarray) -> np.ndarray | None:
    if not problem.optimize_depth:
        return None
    depth = decode_depth(w, problem.basis)
    positive = depth[depth > 0]
    mean_depth = float(positive.mean()) if positive.size else 1.0
    scale = np.ones(problem.n_parameters)
    scale[6:] = max(mean_depth, 1e-6)
    return scale


def _descent_step(
    jacobian: JacobianMatrix,
    residual: ResidualVector,
    lam: float,
    scale: np.ndarray | None,
) -> np.ndarray:
    if scale is None:
        return -lm_step(jacobian, residual, lam)
    scaled = JacobianMatrix(jacobian.entries * scale[None, :], jacobian.n_pose)
    return -(scale * lm_step(scaled, residual, lam))


def solve_level(
    problem: AlignmentProblem,
    init_pose: SE3Pose,
    init_w: np.ndarray,
    provider,
    config: LMConfig,
    level: int = 0,
) -> SolveReport:
    pose = init_pose
    w = np.array(init_w, dtype=np.float64)
    res = compute_residual(problem, pose, w)
    current_cost = cost(res)  # raises DivergedError when nothing is valid
    initial_cost = current_cost
    n_pixels = res.valid.shape[0]
    lam = config.lambda_init
    trace: list[IterationRecord] = []
    termination = "max_iterations"
    converged = False

    for index in range(config.max_iterations):
        res_eval, jac = provider.evaluate(problem, pose, w)
        scale = _column_scale(problem, w)
        accepted = False
        stationary = False
        rejections = 0
        delta = np.zeros(problem.n_parameters)
        trial_cost = current_cost
        while True:
            delta = _descent_step(jac, res_eval, lam, scale)
            # A tiny first proposal means a stationary point, not a damping
            # artifact; rejected retries shrink delta by construction.
            if (
                rejections == 0
                and not config.fixed_iteration_mode
                and float(np.linalg.norm(delta)) <= config.step_tolerance
            ):
                stationary = True
                break
            trial_pose, trial_w = apply_update(pose, w, delta)
            try:
                trial_res = compute_residual(problem, trial_pose, trial_w)
                trial_cost = cost(trial_res)
            except DivergedError:
                trial_cost = np.inf
            if trial_cost < current_cost:
                accepted = True
                break
            rejections += 1
            if rejections > config.max_rejections:
                break
            lam *= config.lambda_up

        if stationary:
            termination, converged = "step_tolerance", True
            break
        step_norm = float(np.linalg.norm(delta)) if accepted else 0.0
        if accepted:
            previous = current_cost
            pose, w = trial_pose, trial_w
            res = trial_res
            current_cost = trial_cost
            lam *= config.lambda_down
            trace.append(
                IterationRecord(
                    level, index, current_cost, lam, step_norm,
                    float(res.valid.sum()) / n_pixels, True,
                )
            )
            if not config.fixed_iteration_mode:
                if step_norm <= config.step_tolerance:
                    termination, converged = "step_tolerance", True
                    break
                if previous - current_cost <= config.cost_tolerance * previous:
                    termination, converged = "cost_tolerance", True
                    break
        else:
            trace.append(
                IterationRecord(
                    level, index, current_cost, lam, 0.0,
                    float(res.valid.sum()) / n_pixels, False,
                )
            )
            if not config.fixed_iteration_mode:
                termination = "rejection_exhausted"
                break

    if config.fixed_iteration_mode:
        termination = "fixed_iterations"
        converged = current_cost < initial_cost or current_cost <= 1e-20
    return SolveReport(pose, w, converged, termination, initial_cost, current_cost, trace)


def _level_intrinsics(intrinsics: CameraIntrinsics, n_levels: int) -> list[CameraIntrinsics]:
    """Coarsest-first intrinsics ladder; input describes the finest level."""
    ladder = [intrinsics]
    for _ in range(n_levels - 1):
        ladder.append(ladder[-1].halved())
    return ladder[::-1]


def _level_bases(basis: DepthBasis, n_levels: int) -> list[DepthBasis]:
    ladder = [basis]
    for _ in range(n_levels - 1):
        ladder.append(downsample_basis(ladder[-1]))
    return ladder[::-1]


def build_level_problems(
    pyr1: ImagePyramid,
    pyr2: ImagePyramid,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
    pixel_sets: list[np.ndarray | None] | None = None,
) -> list[AlignmentProblem]:
    """The per-level problems coarse_to_fine would build, precomputed.

    Problems hold only pose-independent data (features, gradients, pixel
    sets), so one list serves any number of solves of the same pair.
    """
    n_levels = len(pyr1.levels)
    if len(pyr2.levels) != n_levels:
        raise DimensionError("pyramids must share level count")
    intr = _level_intrinsics(intrinsics, n_levels)
    bases = _level_bases(basis, n_levels)
    return [
        AlignmentProblem.build(
            pyr1.levels[level],
            pyr2.levels[level],
            intr[level],
            bases[level],
            optimize_depth=level == n_levels - 1,
            pixel_set=pixel_sets[level] if pixel_sets is not None else None,
        )
        for level in range(n_levels)
    ]


def coarse_to_fine(
    pyr1: ImagePyramid,
    pyr2: ImagePyramid,
    basis: DepthBasis,
    intrinsics: CameraIntrinsics,
    init_pose: SE3Pose,
    providers: list,
    config: LMConfig,
    pixel_sets: list[np.ndarray | None] | None = None,
    problems: list[AlignmentProblem] | None = None,
) -> SolveReport:
    """Pose-only on all but the finest level; joint pose+weights at the end.

    basis and intrinsics describe the finest level; coarser levels get
    pooled bases and halved intrinsics.  Weights start from the basis prior
    at every level and are only optimized at the finest one.  Pass
    `problems` (from build_level_problems) to amortize problem construction
    over many solves of the same pair.
    """
    n_levels = len(pyr1.levels)
    if len(pyr2.levels) != n_levels or len(providers) != n_levels:
        raise DimensionError("pyramids and provider schedule must share level count")
    if problems is None:
        problems = build_level_problems(pyr1, pyr2, basis, intrinsics, pixel_sets)
    if len(problems) != n_levels:
        raise DimensionError("problem schedule must match the pyramid level count")
    bases = _level_bases(basis, n_levels)

    pose = init_pose
    w = np.array(basis.w_star, dtype=np.float64)
    trace: list[IterationRecord] = []
    initial_cost = np.nan
    report: SolveReport | None = None
    for level in range(n_levels):
        finest = level == n_levels - 1
        init_w = np.array(bases[level].w_star, dtype=np.float64)
        report = solve_level(problems[level], pose, init_w, providers[level], config, level=level)
        pose = report.pose
        if finest:
            w = report.w
        if level == 0:
            initial_cost = report.initial_cost
        trace.extend(report.trace)
    assert report is not None
    return SolveReport(
        pose, w, report.converged, report.termination, initial_cost, report.final_cost, trace
    )
