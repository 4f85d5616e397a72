"""Command-line entry point: synthesis, training, alignment, benchmarking.

One JSON config document drives every subcommand; dotted --set overrides
tweak single keys.  The schema is validated before any work happens, and
unknown keys are rejected by name.  Exit codes: 0 success, 1 runtime or
numerical failure, 2 configuration error.

Only the standard library is imported at module scope: the --threads cap
works by setting BLAS pool environment variables, which must happen before
numpy loads, so every numeric import lives inside the command functions.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

_BLAS_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# ---------------------------------------------------------------------------
# Config document

# bool is checked before int everywhere: Python bools pass isinstance(int).
_INT = ("an integer", lambda v: isinstance(v, int) and not isinstance(v, bool))
_FLOAT = (
    "a number",
    lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
)
_BOOL = ("a boolean", lambda v: isinstance(v, bool))
_STR = ("a string", lambda v: isinstance(v, str))
_INT_LIST = (
    "a non-empty list of integers",
    lambda v: isinstance(v, list)
    and len(v) >= 1
    and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
)

_SCHEMA = {
    "seed": _INT,
    "output_dir": _STR,
    "dataset": {
        "n_scenes": _INT,
        "width": _INT,
        "height": _INT,
        "base_depth": _FLOAT,
        "amplitude": _FLOAT,
        "texture_octaves": _INT,
    },
    "model": {
        "level_channels": _INT_LIST,
        "learned_jacobian": _BOOL,
    },
    "train": {
        "learning_rate": _FLOAT,
        "adam_beta1": _FLOAT,
        "adam_beta2": _FLOAT,
        "adam_eps": _FLOAT,
        "unrolled_iterations": _INT,
        "bootstrap_fraction": _FLOAT,
        "loss_weight_lambda": _FLOAT,
        "batch_size": _INT,
        "epochs": _INT,
        "lm_lambda": _FLOAT,
        "max_pixels": _INT,
        "rot_range_deg": _FLOAT,
        "trans_fraction": _FLOAT,
        "n_modes": _INT,
        "samples_per_pair": _INT,
    },
    "solve": {
        "lambda_init": _FLOAT,
        "lambda_up": _FLOAT,
        "lambda_down": _FLOAT,
        "max_iterations": _INT,
        "step_tolerance": _FLOAT,
        "cost_tolerance": _FLOAT,
        "fixed_iteration_mode": _BOOL,
        "max_rejections": _INT,
        "n_modes": _INT,
        "levels": _INT,
    },
    "bench": {
        "trials_per_pair": _INT,
        "iterations": _INT,
        "lambda_init": _FLOAT,
        "max_pixels": _INT,
        "n_modes": _INT,
        "levels": _INT,
    },
}

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "dataset": {
        "n_scenes": 2,
        "width": 128,
        "height": 96,
        "base_depth": 4.0,
        "amplitude": 0.8,
        "texture_octaves": 4,
    },
    "model": {
        "level_channels": [16, 12, 8],
        "learned_jacobian": False,
    },
    "train": {
        "learning_rate": 1e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "unrolled_iterations": 3,
        "bootstrap_fraction": 0.3,
        "loss_weight_lambda": 1.0,
        "batch_size": 4,
        "epochs": 20,
        "lm_lambda": 1e-2,
        "max_pixels": 512,
        "rot_range_deg": 5.0,
        "trans_fraction": 0.05,
        "n_modes": 8,
        "samples_per_pair": 1,
    },
    "solve": {
        "lambda_init": 1e-2,
        "lambda_up": 10.0,
        "lambda_down": 0.3,
        "max_iterations": 30,
        "step_tolerance": 1e-8,
        "cost_tolerance": 1e-10,
        "fixed_iteration_mode": False,
        "max_rejections": 8,
        "n_modes": 8,
        "levels": 3,
    },
    "bench": {
        "trials_per_pair": 100,
        "iterations": 5,
        "lambda_init": 1e-2,
        "max_pixels": 256,
        "n_modes": 8,
        "levels": 3,
    },
}


def _config_error(message: str):
    from .errors import ConfigError

    return ConfigError(message)


def validate_config(doc: dict, schema: dict = _SCHEMA, prefix: str = "") -> None:
    """Reject unknown keys by dotted name and check leaf types."""
    if not isinstance(doc, dict):
        raise _config_error(f"config section {prefix or '<root>'} must be an object")
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise _config_error(f"unknown config key: {path}")
        expected = schema[key]
        if isinstance(expected, dict):
            validate_config(value, expected, prefix=f"{path}.")
        else:
            name, check = expected
            if not check(value):
                raise _config_error(f"config key {path} expects {name}, got {value!r}")


def _merge(base: dict, update: dict) -> dict:
    for key, value in update.items():
        if isinstance(value, dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def apply_override(config: dict, spec: str) -> None:
    """Apply one dotted-path override, e.g. train.epochs=5.

    Values parse as JSON, falling back to a bare string; the key must
    already exist in the schema.
    """
    if "=" not in spec:
        raise _config_error(f"override {spec!r} must look like section.key=value")
    dotted, raw = spec.split("=", 1)
    parts = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    schema = _SCHEMA
    target = config
    for part in parts[:-1]:
        if not isinstance(schema.get(part), dict):
            raise _config_error(f"unknown config key: {dotted}")
        schema = schema[part]
        target = target[part]
    leaf = parts[-1]
    if leaf not in schema or isinstance(schema[leaf], dict):
        raise _config_error(f"unknown config key: {dotted}")
    name, check = schema[leaf]
    if not check(value):
        raise _config_error(f"config key {dotted} expects {name}, got {value!r}")
    target[leaf] = value


def load_run_config(path: str | None, overrides: list[str] | None = None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise _config_error(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise _config_error(f"config file is not valid JSON: {exc}") from None
        validate_config(doc)
        _merge(config, doc)
    for spec in overrides or []:
        apply_override(config, spec)
    return config


# ---------------------------------------------------------------------------
# Shared plumbing


def _apply_thread_cap(threads: int | None) -> None:
    """Cap BLAS pools; --threads wins, REGALIGN_THREADS is the fallback."""
    if threads is None:
        env = os.environ.get("REGALIGN_THREADS")
        if env is None:
            return
        try:
            threads = int(env)
        except ValueError:
            raise _config_error(f"REGALIGN_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise _config_error("thread count must be at least 1")
    for var in _BLAS_ENV_VARS:
        os.environ[var] = str(threads)


def _scene_params(config: dict):
    from .errors import DimensionError
    from .synth import SceneParams

    d = config["dataset"]
    try:
        return SceneParams(
            base_depth=float(d["base_depth"]),
            amplitude=float(d["amplitude"]),
            texture_octaves=d["texture_octaves"],
            width=d["width"],
            height=d["height"],
        )
    except DimensionError as exc:
        raise _config_error(f"dataset section: {exc}") from exc


def _lm_config(config: dict, fixed_iterations: int | None = None):
    from .errors import DimensionError
    from .solver import LMConfig

    s = config["solve"]
    try:
        return LMConfig(
            lambda_init=float(s["lambda_init"]),
            lambda_up=float(s["lambda_up"]),
            lambda_down=float(s["lambda_down"]),
            max_iterations=fixed_iterations or s["max_iterations"],
            step_tolerance=float(s["step_tolerance"]),
            cost_tolerance=float(s["cost_tolerance"]),
            fixed_iteration_mode=(
                True if fixed_iterations else s["fixed_iteration_mode"]
            ),
            max_rejections=s["max_rejections"],
        )
    except DimensionError as exc:
        raise _config_error(f"solve section: {exc}") from exc


def _load_model_file(path: str, role: str):
    from .learn import load_model

    if not Path(path).exists():
        raise _config_error(f"{role} checkpoint not found: {path}")
    return load_model(path)


def _output_dir(config: dict) -> Path:
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args: argparse.Namespace, config: dict) -> int:
    from .synth import generate_dataset

    out = Path(args.out) if args.out else _output_dir(config) / "dataset"
    params = _scene_params(config)
    manifest, rejections = generate_dataset(
        out, config["dataset"]["n_scenes"], config["seed"], params
    )
    n_pairs = len(manifest["pairs"])
    print(f"wrote {n_pairs} pairs to {out} ({rejections} pose rejections)")
    if rejections > n_pairs:
        print(
            "warning: over half of the candidate poses were rejected; "
            "consider a smaller baseline or a shallower scene",
            file=sys.stderr,
        )
    return 0


def cmd_train(args: argparse.Namespace, config: dict) -> int:
    from .errors import DimensionError
    from .learn import ModelState, TrainConfig, make_train_sample, train
    from .streams import stream_rng
    from .synth import load_manifest, load_pair

    manifest = load_manifest(args.dataset)
    pairs = [load_pair(args.dataset, entry) for entry in manifest["pairs"]]
    t, m = config["train"], config["model"]
    try:
        train_config = TrainConfig(
            learning_rate=float(t["learning_rate"]),
            adam_beta1=float(t["adam_beta1"]),
            adam_beta2=float(t["adam_beta2"]),
            adam_eps=float(t["adam_eps"]),
            unrolled_iterations=t["unrolled_iterations"],
            bootstrap_fraction=float(t["bootstrap_fraction"]),
            loss_weight_lambda=float(t["loss_weight_lambda"]),
            batch_size=t["batch_size"],
            epochs=t["epochs"],
            seed=config["seed"],
            lm_lambda=float(t["lm_lambda"]),
            max_pixels=t["max_pixels"],
            learned_jacobian=m["learned_jacobian"],
        )
    except DimensionError as exc:
        raise _config_error(f"train section: {exc}") from exc

    rng = stream_rng(config["seed"], "cli", "train-samples")
    samples = [
        make_train_sample(
            pair,
            rng,
            rot_range_deg=float(t["rot_range_deg"]),
            trans_fraction=float(t["trans_fraction"]),
            n_modes=t["n_modes"],
        )
        for pair in pairs
        for _ in range(t["samples_per_pair"])
    ]
    model = ModelState.initialize(
        tuple(m["level_channels"]), config["seed"], m["learned_jacobian"]
    )
    out = _output_dir(config)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    log = Path(args.log) if args.log else out / "train_log.csv"
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    log.parent.mkdir(parents=True, exist_ok=True)

    model, rows = train(
        samples, model, train_config, log, checkpoint,
        resume=args.resume, progress=print,
    )
    final = rows[-1] if rows else {"mean_loss": float("nan")}
    print(
        f"trained {len(rows)} epochs over {len(samples)} samples; "
        f"final mean loss {final['mean_loss']:.6g}; "
        f"checkpoint {checkpoint}, log {log}"
    )
    return 0


def _parse_pose(value: str | None):
    from .geometry import SE3Pose

    if value is None:
        return SE3Pose.identity()
    text = value
    if not value.lstrip().startswith("["):
        path = Path(value)
        if not path.exists():
            raise _config_error(f"pose file not found: {value}")
        text = path.read_text()
    try:
        numbers = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _config_error(f"pose must be a JSON list of 16 numbers: {exc}") from None
    from .errors import DimensionError

    try:
        return SE3Pose.from_json(numbers)
    except (DimensionError, TypeError, ValueError) as exc:
        raise _config_error(f"bad pose: {exc}") from exc


def _parse_intrinsics(value: str | None, width: int, height: int):
    from .geometry import CameraIntrinsics

    if value is None:
        # Same default pinhole the synthesizer uses.
        f = 1.1 * width
        return CameraIntrinsics(
            fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height,
        )
    text = value
    if not value.lstrip().startswith("{"):
        path = Path(value)
        if not path.exists():
            raise _config_error(f"intrinsics file not found: {value}")
        text = path.read_text()
    try:
        doc = json.loads(text)
        intr = CameraIntrinsics.from_json(doc)
    except Exception as exc:
        raise _config_error(f"bad intrinsics: {exc}") from exc
    if (intr.width, intr.height) != (width, height):
        raise _config_error(
            f"intrinsics are {intr.width}x{intr.height} but the images are {width}x{height}"
        )
    return intr


def _write_alignment_visuals(args, i1, i2, report, basis, intrinsics) -> None:
    import numpy as np

    from .depth_basis import decode_depth
    from .geometry import warp_many
    from .image import bilinear_many, pixel_grid
    from .image_io import save_png

    pix = pixel_grid(intrinsics.width, intrinsics.height)
    cols = pix.astype(np.int64)
    depth = decode_depth(report.w, basis)[cols[:, 1], cols[:, 0]]
    coords, _, in_front = warp_many(pix, depth, report.pose, intrinsics)
    samples, sample_ok = bilinear_many(i2.data, coords)
    valid = in_front & (depth > 0) & sample_ok
    samples[~valid] = 0.0
    shape = (intrinsics.height, intrinsics.width, i2.channels)
    warped = samples.reshape(shape)
    if args.warped:
        save_png(warped, args.warped)
    if args.error_map:
        error = np.abs(warped - i1.data)
        error[~valid.reshape(intrinsics.height, intrinsics.width)] = 0.0
        save_png(error, args.error_map)


def cmd_align(args: argparse.Namespace, config: dict) -> int:
    import numpy as np

    from .depth_basis import build_basis
    from .errors import DivergedError, NumericalFailureError
    from .features import extract_pyramid, photometric_pyramid
    from .image_io import load_pfm, load_png
    from .providers import LearnedProvider, NumericalProvider
    from .solver import coarse_to_fine

    if args.provider == "learned" and not args.checkpoint:
        raise _config_error("--provider learned requires --checkpoint")
    model = _load_model_file(args.checkpoint, "model") if args.checkpoint else None
    if args.provider == "learned" and model.jpn is None:
        raise _config_error("checkpoint has no Jacobian network; use --provider numerical")

    for path in (args.i1, args.i2):
        if not Path(path).exists():
            raise _config_error(f"image not found: {path}")
    i1, i2 = load_png(args.i1), load_png(args.i2)
    if i1.data.shape != i2.data.shape:
        raise _config_error("the two images must share a resolution")

    s = config["solve"]
    n_levels = model.fln.levels if model is not None else s["levels"]
    intrinsics = _parse_intrinsics(args.intrinsics, i1.width, i1.height)
    if args.depth:
        if not Path(args.depth).exists():
            raise _config_error(f"depth file not found: {args.depth}")
        depth_map = load_pfm(args.depth).astype(np.float64)
    else:
        # No depth prior given: flat scene at the configured base depth,
        # refined at the coarsest level by the solver itself.
        depth_map = np.full(
            (i1.height, i1.width), float(config["dataset"]["base_depth"])
        )
    basis = build_basis(depth_map, n=s["n_modes"])

    init_pose = _parse_pose(args.pose_init)
    if model is not None:
        pyr1, pyr2 = extract_pyramid(i1, model.fln), extract_pyramid(i2, model.fln)
    else:
        pyr1, pyr2 = photometric_pyramid(i1, n_levels), photometric_pyramid(i2, n_levels)
    providers = [
        LearnedProvider(model.jpn)
        if args.provider == "learned" and level == 0
        else NumericalProvider()
        for level in range(n_levels)
    ]
    lm = _lm_config(config)

    report_path = Path(args.out) if args.out else _output_dir(config) / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        report = coarse_to_fine(
            pyr1, pyr2, basis, intrinsics, init_pose, providers, lm
        )
    except (DivergedError, NumericalFailureError) as exc:
        kind = "diverged" if isinstance(exc, DivergedError) else "numerical_failure"
        doc = {
            "converged": False,
            "termination": kind,
            "error": str(exc),
            "pose": init_pose.to_json(),
        }
        report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"alignment failed ({kind}): {exc}; report {report_path}", file=sys.stderr)
        return 1
    report_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    if args.warped or args.error_map:
        _write_alignment_visuals(args, i1, i2, report, basis, intrinsics)
    print(
        f"cost {report.initial_cost:.6g} -> {report.final_cost:.6g} "
        f"converged={report.converged} termination={report.termination} "
        f"report={report_path}"
    )
    return 0


def cmd_bench(args: argparse.Namespace, config: dict) -> int:
    from .bench import ARM_NAMES, BenchConfig, make_arms, run_ablation, write_outputs
    from .errors import DimensionError
    from .synth import load_manifest, load_pair

    manifest = load_manifest(args.dataset)
    entries = manifest["pairs"]
    if args.pairs is not None:
        if args.pairs < 1:
            raise _config_error("--pairs must be at least 1")
        entries = entries[: args.pairs]
    dataset = [load_pair(args.dataset, entry) for entry in entries]

    names = tuple(args.arms.split(",")) if args.arms else ARM_NAMES
    numerical = (
        _load_model_file(args.numerical_checkpoint, "numerical-scheme")
        if args.numerical_checkpoint
        else None
    )
    learned = (
        _load_model_file(args.learned_checkpoint, "joint")
        if args.learned_checkpoint
        else None
    )
    arms = make_arms(names, numerical_model=numerical, learned_model=learned)

    b = config["bench"]
    try:
        bench_config = BenchConfig(
            trials_per_pair=args.trials if args.trials else b["trials_per_pair"],
            iterations=b["iterations"],
            seed=config["seed"],
            lambda_init=float(b["lambda_init"]),
            max_pixels=b["max_pixels"],
            n_modes=b["n_modes"],
            levels=b["levels"],
        )
    except DimensionError as exc:
        raise _config_error(f"bench section: {exc}") from exc

    def progress(pair_id: str, trial: int) -> None:
        if trial == bench_config.trials_per_pair - 1:
            print(f"{pair_id}: {bench_config.trials_per_pair} trials x {len(arms)} arms")

    records = run_ablation(dataset, arms, bench_config, progress=progress)
    out = Path(args.out) if args.out else _output_dir(config) / "bench"
    write_outputs(
        records,
        out,
        meta={
            "seed": config["seed"],
            "arms": list(names),
            "pairs": len(dataset),
            "trials_per_pair": bench_config.trials_per_pair,
            "iterations": bench_config.iterations,
        },
    )
    for name in sorted({r.arm for r in records}):
        finals = [r.final_reproj for r in records if r.arm == name]
        rate = sum(1 for f in finals if f < 0.05) / len(finals)
        print(f"{name}: success rate {rate:.3f} over {len(finals)} trials")
    print(f"wrote {len(records)} records to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regalign",
        description="Direct image registration: synthesize, train, align, benchmark.",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="cap BLAS worker threads (fallback: REGALIGN_THREADS)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="dotted config override, e.g. train.epochs=5",
        )

    p = sub.add_parser("synth", help="render a synthetic dataset")
    common(p)
    p.add_argument("--out", default=None, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the feature and Jacobian networks")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--checkpoint", default=None, help="checkpoint path to write")
    p.add_argument("--log", default=None, help="training log CSV path")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", help="align one image pair")
    common(p)
    p.add_argument("--i1", required=True, help="reference image PNG")
    p.add_argument("--i2", required=True, help="target image PNG")
    p.add_argument("--checkpoint", default=None, help="trained model checkpoint")
    p.add_argument(
        "--provider", choices=("numerical", "learned"), default="numerical",
        help="Jacobian source at the coarsest level",
    )
    p.add_argument(
        "--pose-init", default=None,
        help="initial pose: JSON list of 16 numbers, inline or a file path",
    )
    p.add_argument(
        "--intrinsics", default=None,
        help="camera intrinsics JSON (inline or file); default matches the synthesizer",
    )
    p.add_argument("--depth", default=None, help="PFM depth prior for the basis")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--warped", default=None, help="write the warped target PNG here")
    p.add_argument(
        "--error-map", default=None, help="write the appearance-error PNG here"
    )
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("bench", help="run the method-comparison benchmark")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument(
        "--numerical-checkpoint", default=None,
        help="checkpoint trained with the numerical scheme",
    )
    p.add_argument(
        "--learned-checkpoint", default=None,
        help="checkpoint trained jointly with the Jacobian network",
    )
    p.add_argument(
        "--arms", default=None,
        help="comma-separated arm subset (default: all four)",
    )
    p.add_argument("--trials", type=int, default=None, help="trials per pair")
    p.add_argument("--pairs", type=int, default=None, help="use only the first N pairs")
    p.add_argument("--out", default=None, help="output directory for the CSV bundle")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_thread_cap(args.threads)
        config = load_run_config(args.config, args.set)
        return args.func(args, config)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps to exit codes
        from .errors import ConfigError, RegalignError

        if isinstance(exc, ConfigError):
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if isinstance(exc, FileNotFoundError):
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        if isinstance(exc, (RegalignError, OSError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
