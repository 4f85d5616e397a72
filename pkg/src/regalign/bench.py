"""Ablation harness: four method arms over paired random initializations.

Each (pair, trial) cell draws one perturbed start pose; every arm solves
from that identical initialization so arm comparisons cancel the draw.
Per-trial records feed a reprojection-error CDF, success ratios bucketed
by initial error, and per-arm summary statistics.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depth_basis import DepthBasis, build_basis, decode_depth
from .errors import ConfigError, DimensionError, DivergedError, NumericalFailureError
from .features import extract_pyramid, photometric_pyramid
from .geometry import (
    EPSILON_Z,
    CameraIntrinsics,
    SE3Pose,
    rotation_angle_deg,
    translation_angle_deg,
    warp_many,
)
from .image import pixel_grid
from .learn import ModelState, _inside
from .providers import LearnedProvider, NumericalProvider
from .solver import (
    LMConfig,
    SolveReport,
    _level_intrinsics,
    build_level_problems,
    coarse_to_fine,
)
from .streams import stream_rng
from .synth import DatasetPair, perturb_pose

ARM_NAMES = ("conventional", "learned_feature", "regnet", "regnet_numerical_jacobian")

# Initial-perturbation sweep; trial t uses cell t mod 16, so the 100 trials
# of a pair cover every (rotation, translation) magnitude combination and
# populate all initial-error buckets.
SWEEP_ROTATIONS_DEG = (2.0, 5.0, 10.0, 15.0)
SWEEP_TRANSLATION_FRACTIONS = (0.02, 0.05, 0.10, 0.15)

# Success definition: final reprojection below 5% of image width.
SUCCESS_THRESHOLD = 0.05
LOW_SAMPLE_COUNT = 20
FAILED_TRIAL_ERROR = 1.0  # recorded reprojection for a diverged solve


@dataclass(frozen=True)
class BenchConfig:
    trials_per_pair: int = 100
    iterations: int = 5  # per level, fixed (no accept/reject)
    seed: int = 0
    lambda_init: float = 1e-2
    max_pixels: int = 256  # solver residual subsample per level
    n_modes: int = 8  # depth basis size built per pair
    levels: int = 4  # pyramid depth when no model arm pins it

    def __post_init__(self) -> None:
        if self.trials_per_pair < 1 or self.iterations < 1:
            raise ConfigError("trials_per_pair and iterations must be positive")
        if self.lambda_init <= 0:
            raise ConfigError("lambda_init must be positive")
        if self.max_pixels < 1 or self.n_modes < 1 or self.levels < 1:
            raise ConfigError("max_pixels, n_modes, levels must be positive")


@dataclass(frozen=True)
class MethodArm:
    """One test configuration: pyramid source plus provider schedule."""

    name: str
    model: ModelState | None  # None = raw photometric pyramid
    learned_at_coarsest: bool

    @property
    def levels(self) -> int | None:
        return None if self.model is None else self.model.fln.levels


@dataclass(frozen=True)
class TrialRecord:
    pair_id: str
    trial: int
    arm: str
    initial_reproj: float  # fraction of image width
    final_reproj: float  # fraction of image width
    iterations: int
    rotation_error_deg: float
    translation_angle_error_deg: float  # nan when a direction is undefined
    wall_time: float  # seconds; never serialized into records.csv


def make_arms(
    names: tuple[str, ...] | list[str],
    numerical_model: ModelState | None = None,
    learned_model: ModelState | None = None,
) -> list[MethodArm]:
    """Validate checkpoint availability and build the arm list.

    The learned_feature arm tests the numerically-trained features; the two
    regnet arms share the jointly-trained checkpoint and differ only in the
    test-time Jacobian source.  All failures surface here, before any trial
    runs.
    """
    if not names:
        raise ConfigError("no arms requested")
    arms = []
    for name in names:
        if name == "conventional":
            arms.append(MethodArm(name, None, False))
        elif name == "learned_feature":
            if numerical_model is None:
                raise ConfigError("learned_feature arm needs the numerical-scheme checkpoint")
            arms.append(MethodArm(name, numerical_model, False))
        elif name == "regnet":
            if learned_model is None or learned_model.jpn is None:
                raise ConfigError("regnet arm needs a checkpoint with a Jacobian network")
            arms.append(MethodArm(name, learned_model, True))
        elif name == "regnet_numerical_jacobian":
            if learned_model is None:
                raise ConfigError("regnet_numerical_jacobian arm needs the joint checkpoint")
            arms.append(MethodArm(name, learned_model, False))
        else:
            raise ConfigError(f"unknown arm {name!r}")
    if len({a.name for a in arms}) != len(arms):
        raise ConfigError("duplicate arm names")
    return arms


# ---------------------------------------------------------------------------
# Metrics


def reprojection_error_metric(
    pose: SE3Pose,
    w: np.ndarray,
    basis: DepthBasis,
    t_star: SE3Pose,
    d_star: np.ndarray,
    intrinsics: CameraIntrinsics,
    pixel_set: np.ndarray | None = None,
) -> float:
    """Mean warp distance between estimate and truth, / image width.

    Pixels must be valid (in front, positive depth, inside the grid) under
    both warps to count; none valid raises the diverged-state error.
    """
    if pixel_set is None:
        pixel_set = pixel_grid(intrinsics.width, intrinsics.height)
    pixf = np.asarray(pixel_set, dtype=np.float64)
    cols = pixf.astype(np.int64)
    d_pred = decode_depth(w, basis)[cols[:, 1], cols[:, 0]]
    d_true = np.asarray(d_star, dtype=np.float64)[cols[:, 1], cols[:, 0]]
    pred, _, front_p = warp_many(pixf, d_pred, pose, intrinsics)
    target, _, front_t = warp_many(pixf, d_true, t_star, intrinsics)
    valid = (
        front_p
        & front_t
        & (d_pred > EPSILON_Z)
        & (d_true > EPSILON_Z)
        & _inside(np.where(front_p[:, None], pred, 0.0), intrinsics)
        & _inside(np.where(front_t[:, None], target, 0.0), intrinsics)
    )
    if not valid.any():
        raise DivergedError("no pixel is valid under both warps")
    dist = np.sqrt(((pred[valid] - target[valid]) ** 2).sum(axis=1))
    return float(dist.mean()) / intrinsics.width


def pose_error_metrics(pose: SE3Pose, t_star: SE3Pose) -> tuple[float, float]:
    """(rotation error deg, translation direction angle deg).

    Translation is compared up to scale; a direction is undefined when its
    norm is below 1e-9, recorded as nan.
    """
    return (
        rotation_angle_deg(pose.rotation, t_star.rotation),
        translation_angle_deg(pose.translation, t_star.translation),
    )


# ---------------------------------------------------------------------------
# The ablation loop


def _subsampled_pixel_sets(
    intrinsics: CameraIntrinsics, n_levels: int, max_pixels: int, seed: int, pair_id: str
) -> list[np.ndarray | None]:
    """Per-level residual subsets, identical for every arm and trial of a
    pair so the paired design stays fair and problems stay cacheable."""
    sets: list[np.ndarray | None] = []
    for level, intr in enumerate(_level_intrinsics(intrinsics, n_levels)):
        grid = pixel_grid(intr.width, intr.height).astype(np.int64)
        if grid.shape[0] <= max_pixels:
            sets.append(None)
        else:
            rng = stream_rng(seed, "bench", "pix", pair_id, level)
            keep = np.sort(rng.choice(grid.shape[0], size=max_pixels, replace=False))
            sets.append(grid[keep])
    return sets


def _arm_levels(arms: list[MethodArm], config: BenchConfig) -> int:
    pinned = {a.levels for a in arms if a.levels is not None}
    if len(pinned) > 1:
        raise ConfigError(f"arms disagree on pyramid depth: {sorted(pinned)}")
    return pinned.pop() if pinned else config.levels


def _providers(arm: MethodArm, n_levels: int) -> list:
    out = []
    for level in range(n_levels):
        if arm.learned_at_coarsest and level == 0:
            out.append(LearnedProvider(arm.model.jpn))
        else:
            out.append(NumericalProvider())
    return out


def run_ablation(
    dataset: list[DatasetPair],
    arms: list[MethodArm],
    config: BenchConfig,
    progress=None,
) -> list[TrialRecord]:
    """All (pair, trial, arm) solves, sorted by (pair, trial, arm).

    Every arm in a (pair, trial) cell starts from the bit-identical
    perturbed pose.  Solves run fixed-iteration LM (config.iterations per
    level).  A diverged solve records reprojection 1.0 and the initial
    pose's errors.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    n_levels = _arm_levels(arms, config)
    lm = LMConfig(
        lambda_init=config.lambda_init,
        max_iterations=config.iterations,
        fixed_iteration_mode=True,
    )
    records: list[TrialRecord] = []
    for pair in dataset:
        basis = build_basis(pair.d_star, n=config.n_modes)
        pixel_sets = _subsampled_pixel_sets(
            pair.intrinsics, n_levels, config.max_pixels, config.seed, pair.pair_id
        )
        prepared = []
        for arm in arms:
            if arm.model is None:
                pyr1 = photometric_pyramid(pair.i1, n_levels)
                pyr2 = photometric_pyramid(pair.i2, n_levels)
            else:
                pyr1 = extract_pyramid(pair.i1, arm.model.fln)
                pyr2 = extract_pyramid(pair.i2, arm.model.fln)
            problems = build_level_problems(
                pyr1, pyr2, basis, pair.intrinsics, pixel_sets
            )
            prepared.append((arm, pyr1, pyr2, problems, _providers(arm, n_levels)))

        for trial in range(config.trials_per_pair):
            cell = trial % (len(SWEEP_ROTATIONS_DEG) * len(SWEEP_TRANSLATION_FRACTIONS))
            rot_range = SWEEP_ROTATIONS_DEG[cell // len(SWEEP_TRANSLATION_FRACTIONS)]
            trans_fraction = SWEEP_TRANSLATION_FRACTIONS[cell % len(SWEEP_TRANSLATION_FRACTIONS)]
            rng = stream_rng(config.seed, "bench", "init", pair.pair_id, trial)
            t0 = perturb_pose(
                pair.t_star, rot_range, trans_fraction, pair.mean_depth, rng
            )
            try:
                initial = reprojection_error_metric(
                    t0, basis.w_star, basis, pair.t_star, pair.d_star, pair.intrinsics
                )
            except DivergedError:
                initial = FAILED_TRIAL_ERROR

            for arm, pyr1, pyr2, problems, providers in prepared:
                started = time.perf_counter()
                report: SolveReport | None = None
                try:
                    report = coarse_to_fine(
                        pyr1, pyr2, basis, pair.intrinsics, t0, providers, lm,
                        problems=problems,
                    )
                    final = reprojection_error_metric(
                        report.pose, report.w, basis,
                        pair.t_star, pair.d_star, pair.intrinsics,
                    )
                    out_pose = report.pose
                except (DivergedError, NumericalFailureError):
                    final = FAILED_TRIAL_ERROR
                    out_pose = report.pose if report is not None else t0
                elapsed = time.perf_counter() - started
                rot_err, trans_err = pose_error_metrics(out_pose, pair.t_star)
                records.append(
                    TrialRecord(
                        pair_id=pair.pair_id,
                        trial=trial,
                        arm=arm.name,
                        initial_reproj=initial,
                        final_reproj=final,
                        iterations=len(report.trace) if report is not None else 0,
                        rotation_error_deg=rot_err,
                        translation_angle_error_deg=trans_err,
                        wall_time=elapsed,
                    )
                )
            if progress is not None:
                progress(pair.pair_id, trial)
    records.sort(key=lambda r: (r.pair_id, r.trial, r.arm))
    return records


# ---------------------------------------------------------------------------
# Tables


def _cells(records: list[TrialRecord]) -> dict[tuple[str, int], float]:
    """(pair, trial) -> shared initial error; checks the paired design."""
    cells: dict[tuple[str, int], float] = {}
    for r in records:
        key = (r.pair_id, r.trial)
        if key in cells and cells[key] != r.initial_reproj:
            raise DimensionError(f"cell {key} has mismatched initial errors")
        cells[key] = r.initial_reproj
    return cells


def reprojection_cdf(records: list[TrialRecord], n_points: int = 50) -> dict:
    """Empirical CDFs of final error per arm plus the initial reference.

    Thresholds are log-spaced over [0.0025, 0.5]; each value is the
    fraction of trials with error <= threshold.
    """
    if not records:
        raise DimensionError("no records")
    thresholds = np.logspace(np.log10(0.0025), np.log10(0.5), n_points)
    initial = np.array(sorted(_cells(records).values()))
    arms = sorted({r.arm for r in records})
    curves: dict[str, list[float]] = {}
    for arm in arms:
        finals = np.sort(np.array([r.final_reproj for r in records if r.arm == arm]))
        curves[arm] = [
            float(np.searchsorted(finals, t, side="right")) / finals.size for t in thresholds
        ]
    reference = [
        float(np.searchsorted(initial, t, side="right")) / initial.size for t in thresholds
    ]
    return {"thresholds": [float(t) for t in thresholds], "initial": reference, "arms": curves}


def success_ratio_by_bucket(
    records: list[TrialRecord],
    bucket_width: float = 0.05,
    max_bucket: float = 0.30,
    success_threshold: float = SUCCESS_THRESHOLD,
) -> list[dict]:
    """Success ratio per arm per initial-error bucket.

    Buckets are [0, w), [w, 2w), ..., [max_bucket - w, max_bucket), then a
    final [max_bucket, 1] catch-all; every record lands in exactly one.
    Buckets holding fewer than 20 trials are flagged low-sample.
    """
    if not records:
        raise DimensionError("no records")
    n_regular = int(round(max_bucket / bucket_width))
    edges = [i * bucket_width for i in range(n_regular + 1)]
    labels = [f"[{edges[i]:.2f},{edges[i + 1]:.2f})" for i in range(n_regular)]
    labels.append(f"[{max_bucket:.2f},1]")
    arms = sorted({r.arm for r in records})
    rows = []
    for arm in arms:
        arm_records = [r for r in records if r.arm == arm]
        for i, label in enumerate(labels):
            if i < n_regular:
                members = [
                    r for r in arm_records if edges[i] <= r.initial_reproj < edges[i + 1]
                ]
                low, high = edges[i], edges[i + 1]
            else:
                members = [r for r in arm_records if r.initial_reproj >= max_bucket]
                low, high = max_bucket, 1.0
            n = len(members)
            successes = sum(1 for r in members if r.final_reproj < success_threshold)
            rows.append(
                {
                    "arm": arm,
                    "bucket": label,
                    "low": low,
                    "high": high,
                    "n": n,
                    "successes": successes,
                    "ratio": successes / n if n else math.nan,
                    "low_sample": n < LOW_SAMPLE_COUNT,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# Output bundle


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.10g}"


def _arm_summary(arm_records: list[TrialRecord]) -> dict:
    finals = np.array([r.final_reproj for r in arm_records])
    initials = np.array([r.initial_reproj for r in arm_records])
    rots = np.array([r.rotation_error_deg for r in arm_records])
    trans = np.array([r.translation_angle_error_deg for r in arm_records])
    defined = np.isfinite(trans)
    return {
        "trials": len(arm_records),
        "mean_initial_reproj": float(initials.mean()),
        "mean_final_reproj": float(finals.mean()),
        "median_final_reproj": float(np.median(finals)),
        "success_rate": float((finals < SUCCESS_THRESHOLD).mean()),
        "failed_trials": int((finals >= FAILED_TRIAL_ERROR).sum()),
        "mean_rotation_error_deg": float(rots.mean()),
        "median_rotation_error_deg": float(np.median(rots)),
        "mean_translation_angle_error_deg": (
            float(trans[defined].mean()) if defined.any() else math.nan
        ),
        "median_translation_angle_error_deg": (
            float(np.median(trans[defined])) if defined.any() else math.nan
        ),
        "translation_direction_undefined": int((~defined).sum()),
        "total_wall_time_s": float(sum(r.wall_time for r in arm_records)),
    }


def write_outputs(records: list[TrialRecord], out_dir: str | Path, meta: dict | None = None) -> None:
    """records.csv, cdf.csv, success_ratio.csv, summary.json.

    Wall times live only in summary.json; the CSVs are byte-deterministic
    under a fixed seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "records.csv", "w", newline="") as fh:
        fh.write(
            "pair,trial,arm,initial_reproj,final_reproj,iterations,"
            "rotation_error_deg,translation_angle_error_deg\n"
        )
        for r in records:
            fh.write(
                f"{r.pair_id},{r.trial},{r.arm},{_fmt(r.initial_reproj)},"
                f"{_fmt(r.final_reproj)},{r.iterations},{_fmt(r.rotation_error_deg)},"
                f"{_fmt(r.translation_angle_error_deg)}\n"
            )

    cdf = reprojection_cdf(records)
    arm_names = sorted(cdf["arms"])
    with open(out / "cdf.csv", "w", newline="") as fh:
        fh.write("threshold,initial," + ",".join(arm_names) + "\n")
        for i, t in enumerate(cdf["thresholds"]):
            row = [_fmt(t), _fmt(cdf["initial"][i])]
            row += [_fmt(cdf["arms"][a][i]) for a in arm_names]
            fh.write(",".join(row) + "\n")

    with open(out / "success_ratio.csv", "w", newline="") as fh:
        fh.write("arm,bucket,low,high,n,successes,ratio,low_sample\n")
        for row in success_ratio_by_bucket(records):
            fh.write(
                f"{row['arm']},{row['bucket']},{_fmt(row['low'])},{_fmt(row['high'])},"
                f"{row['n']},{row['successes']},{_fmt(row['ratio'])},"
                f"{int(row['low_sample'])}\n"
            )

    summary = {
        "reprojection_statistic": "mean",
        "success_threshold": SUCCESS_THRESHOLD,
        "arms": {
            arm: _arm_summary([r for r in records if r.arm == arm])
            for arm in sorted({r.arm for r in records})
        },
    }
    if meta:
        summary["meta"] = meta
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
