from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import pydantic
import scipy
from loguru import logger

from src.config import Settings, get_settings
from src.datasets.dataset import SnapshotDataset, load_dataset, save_dataset
from src.datasets.toy import generate_toy_dataset
from src.errors import BacktrackingExhaustedError, ConfigError, MorphOptError
from src.mesh.io import read_mesh, write_field, write_vtk
from src.mesh.triangle_mesh import signed_areas
from src.morphing.checkpoint import FINAL_CHECKPOINT, Checkpoint, checkpoint_name, read_checkpoint, write_checkpoint
from src.morphing.optimizer import (
    ContinuationState,
    MorphingOptimizer,
    OptimizationResult,
    OptimizerTrace,
    restrict_to_mesh,
    transfer_displacement,
)
from src.morphing.sensitivity import SnapshotEvaluator
from src.pod.compress import correlation_matrix, decay_table, pod
from src.schemas.run_config import RunConfig, load_run_config
from src.surrogate.ommgp import evaluate_split, leave_one_out, load_bundle, predict, save_bundle, train

APP_VERSION = "1.0.0"
MANIFEST_FILE = "run_manifest.json"
TRACE_FILE = "trace.csv"


@dataclass
class RunContext:
    command: str
    config: RunConfig
    settings: Settings
    out: Path
    workers: int
    seed: int
    args: argparse.Namespace

    def dataset(self) -> SnapshotDataset:
        if self.config.dataset_dir is None:
            raise ConfigError("dataset_dir is not set in the run configuration")
        return load_dataset(self.config.dataset_dir)

    def morphings(self) -> Checkpoint | None:
        if self.config.morphings_dir is None:
            return None
        path = Path(self.config.morphings_dir) / FINAL_CHECKPOINT
        if not path.is_file():
            raise ConfigError(f"no optimized morphings at {path}")
        return read_checkpoint(path)

    def optimization_dataset(self) -> tuple[SnapshotDataset, SnapshotDataset | None]:
        """The dataset the optimizer runs on and, in the coarse-mesh workflow, the fine dataset."""
        dataset = self.dataset()
        if self.config.coarse_mesh is None:
            return dataset, None
        return restrict_to_mesh(dataset, read_mesh(self.config.coarse_mesh)), dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morphopt", description="Optimal morphings for reduced-order modelling")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="run configuration (JSON)")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--workers", type=int, default=None, help="worker threads for per-snapshot work")
    common.add_argument("--seed", type=int, default=None, help="random seed (GP restarts)")

    commands = parser.add_subparsers(dest="command", required=True)
    gen = commands.add_parser("gen-toy", parents=[common], help="write the Gaussian-ridge toy dataset")
    gen.add_argument("--n", type=int, default=None, help="number of snapshots")
    opt = commands.add_parser("optimize", parents=[common], help="optimize the morphings of a dataset")
    opt.add_argument("--coarse-mesh", type=Path, default=None, help="optimize on this coarse mesh, then transfer")
    resume = commands.add_parser("checkpoint-resume", parents=[common], help="continue an optimization")
    resume.add_argument("--resume", type=Path, required=True, help="checkpoint file")
    commands.add_parser("pod", parents=[common], help="eigenvalue decay of raw and morphed snapshots")
    commands.add_parser("train", parents=[common], help="train the surrogate")
    pred = commands.add_parser("predict", parents=[common], help="predict a field on a new geometry")
    pred.add_argument("--bundle", type=Path, required=True, help="trained surrogate directory")
    pred.add_argument("--mesh", type=Path, required=True, help="geometry to predict on")
    pred.add_argument("--mu", type=float, nargs="*", default=[], help="physical parameters")
    evaluate = commands.add_parser("eval", parents=[common], help="leave-one-out or split evaluation")
    evaluate.add_argument("--bundle", type=Path, default=None, help="trained surrogate for split evaluation")
    return parser


def _resolve(args: argparse.Namespace, settings: Settings) -> RunContext:
    if args.command == "checkpoint-resume":
        if not args.resume.is_file():
            raise ConfigError(f"checkpoint not found: {args.resume}")
        config = read_checkpoint(args.resume).config
    else:
        config = load_run_config(args.config)
    if args.workers is not None:
        workers = args.workers
    elif "workers" in config.model_fields_set:
        workers = config.workers
    else:
        workers = settings.default_workers
    if workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {workers}")
    seed = args.seed if args.seed is not None else config.seed
    overrides = {"workers": workers, "seed": seed}
    if getattr(args, "coarse_mesh", None) is not None:
        overrides["coarse_mesh"] = args.coarse_mesh
    config = config.model_copy(update=overrides)
    if args.out is not None:
        out = args.out
    elif args.command == "checkpoint-resume":
        parent = args.resume.parent
        out = parent.parent if parent.name == "checkpoints" else parent
    elif config.output_dir is not None:
        out = Path(config.output_dir)
    else:
        out = Path(settings.default_output_dir) / args.command
    return RunContext(
        command=args.command, config=config, settings=settings, out=out, workers=workers, seed=seed, args=args
    )


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=float), encoding="utf-8")
    return path


def cmd_gen_toy(ctx: RunContext) -> dict:
    toy = ctx.config.toy
    n = ctx.args.n if ctx.args.n is not None else toy.n
    if n < 1:
        raise ConfigError(f"--n must be at least 1, got {n}")
    dataset = generate_toy_dataset(n, toy.beta_min, toy.beta_max, toy.nx, toy.ny)
    save_dataset(ctx.out, dataset)
    return {"samples": dataset.size, "nodes": dataset.reference.node_count, "betas": dataset.parameters[:, 0].tolist()}


def _report(result: OptimizationResult, out: Path) -> dict:
    fractions = result.eigenvalue_fractions
    inverted = result.family.inverted()
    report = {
        "initial_J": result.initial_J,
        "final_J": result.final_J,
        "one_minus_J": 1.0 - result.final_J,
        "iterations": result.iterations,
        "reason": result.reason,
        "c1": result.continuation.c1,
        "c2": result.continuation.c2 if np.isfinite(result.continuation.c2) else None,
        "mode_energy_fractions": fractions[: min(len(fractions), 10)].tolist(),
        "min_area": result.family.min_area(),
        "bijective": not inverted,
        "first_inversion": result.first_inversion,
        "inverted": {str(index): len(triangles) for index, triangles in inverted.items()},
    }
    _write_json(out / "report.json", report)
    frame = result.trace.to_frame()
    pd.DataFrame({"iter": frame["iter"], "one_minus_J": 1.0 - frame["J"]}).to_csv(
        out / "convergence.csv", index=False, float_format="%.17g"
    )
    return report


def _run_optimizer(
    ctx: RunContext,
    dataset: SnapshotDataset,
    initial: np.ndarray | None = None,
    continuation: ContinuationState | None = None,
    start_iteration: int = 0,
    trace: OptimizerTrace | None = None,
    fine: SnapshotDataset | None = None,
) -> dict:
    optimizer = MorphingOptimizer(dataset, ctx.config.optimizer, workers=ctx.workers)
    every = ctx.config.optimizer.checkpoint_every

    def on_iteration(iteration: int, displacements: np.ndarray, state: ContinuationState, step: float) -> None:
        if every and iteration % every == 0:
            write_checkpoint(
                ctx.out / "checkpoints" / checkpoint_name(iteration),
                Checkpoint(iteration, dataclasses.replace(state), ctx.config, displacements),
            )

    try:
        result = optimizer.optimize(
            initial=initial,
            continuation=continuation,
            start_iteration=start_iteration,
            trace=trace,
            on_iteration=on_iteration,
        )
    except BacktrackingExhaustedError as exc:
        if exc.trace is not None:
            exc.trace.write_csv(ctx.out / TRACE_FILE)
            logger.error("Wrote partial trace to {}", ctx.out / TRACE_FILE)
        raise
    result.trace.write_csv(ctx.out / TRACE_FILE)
    report = _report(result, ctx.out)
    if fine is None:
        final = Checkpoint(result.iterations, result.continuation, ctx.config, result.family.displacements)
    else:
        final = _transferred(ctx, result, fine, report)
    write_checkpoint(ctx.out / FINAL_CHECKPOINT, final)
    logger.info("1-J_{} = {:.6e} after {} iteration(s)", ctx.config.optimizer.r, report["one_minus_J"], result.iterations)
    return report


def _transferred(ctx: RunContext, result: OptimizationResult, fine: SnapshotDataset, report: dict) -> Checkpoint:
    """Coarse morphings interpolated onto the fine reference; the checkpoint resumes on the fine mesh."""
    coarse = result.family.reference
    displacements = np.stack([transfer_displacement(coarse, d, fine.reference) for d in result.family.displacements])
    areas = [signed_areas(fine.reference.nodes + d, fine.reference.triangles) for d in displacements]
    inverted = sum(int(np.sum(a <= 0.0)) for a in areas)
    if inverted:
        logger.warning("Transferred morphings invert {} fine triangle(s)", inverted)
    report.update(
        {
            "coarse_nodes": coarse.node_count,
            "fine_nodes": fine.reference.node_count,
            "fine_min_area": float(min(a.min() for a in areas)),
            "fine_bijective": not inverted,
        }
    )
    _write_json(ctx.out / "report.json", report)
    config = ctx.config.model_copy(update={"coarse_mesh": None})
    return Checkpoint(result.iterations, result.continuation, config, displacements)


def cmd_optimize(ctx: RunContext) -> dict:
    dataset, fine = ctx.optimization_dataset()
    return _run_optimizer(ctx, dataset, fine=fine)


def cmd_checkpoint_resume(ctx: RunContext) -> dict:
    checkpoint = read_checkpoint(ctx.args.resume)
    dataset, fine = ctx.optimization_dataset()
    trace = None
    previous = ctx.out / TRACE_FILE
    if previous.is_file():
        trace = OptimizerTrace.read_csv(previous)
        trace = OptimizerTrace([record for record in trace.records if record.iteration <= checkpoint.iteration])
    logger.info("Resuming from {} at iteration {}", ctx.args.resume, checkpoint.iteration)
    return _run_optimizer(
        ctx,
        dataset,
        initial=checkpoint.displacements,
        continuation=checkpoint.continuation,
        start_iteration=checkpoint.iteration,
        trace=trace,
        fine=fine,
    )


def cmd_pod(ctx: RunContext) -> dict:
    dataset = ctx.dataset()
    r = ctx.config.optimizer.r
    if r > dataset.size:
        raise ConfigError(f"r={r} exceeds the number of snapshots ({dataset.size})")
    evaluator = SnapshotEvaluator(dataset, ctx.config.optimizer.quadrature_degree, ctx.workers)
    identity = np.zeros((dataset.size, dataset.reference.node_count, 2))

    def decay(displacements: np.ndarray) -> pd.DataFrame:
        family = evaluator.family(evaluator.evaluate(displacements))
        return decay_table(pod(correlation_matrix(family), r).eigenvalues)

    raw = decay(identity)
    frame = raw.rename(columns={"fraction": "raw_fraction", "J": "raw_J"})
    checkpoint = ctx.morphings()
    summary = {"r": r, "raw_J": float(raw["J"].iloc[r - 1])}
    if checkpoint is not None:
        morphed = decay(checkpoint.displacements)
        frame["morphed_fraction"] = morphed["fraction"]
        frame["morphed_J"] = morphed["J"]
        summary["morphed_J"] = float(morphed["J"].iloc[r - 1])
    else:
        logger.warning("morphings_dir not set; writing the raw decay only")
    ctx.out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(ctx.out / "pod_decay.csv", index=False, float_format="%.17g")
    return summary


def _reusable_morphings(ctx: RunContext, dataset: SnapshotDataset) -> np.ndarray | None:
    """Optimized morphings from ``optimize`` coincide with phi_opt only when no geometric morphing is needed."""
    checkpoint = ctx.morphings()
    if checkpoint is None:
        return None
    if not dataset.shares_reference() or checkpoint.size != dataset.size:
        logger.warning("Stored morphings do not match this dataset; optimizing again")
        return None
    return checkpoint.displacements


def cmd_train(ctx: RunContext) -> dict:
    dataset = ctx.dataset()
    result = train(
        dataset,
        ctx.config.surrogate,
        ctx.config.optimizer,
        seed=ctx.seed,
        workers=ctx.workers,
        optimal_displacements=_reusable_morphings(ctx, dataset),
    )
    save_bundle(ctx.out / "bundle", result.bundle)
    bundle = result.bundle
    return {
        "n_geo": bundle.n_geo,
        "n_opt": bundle.n_opt,
        "r": bundle.r,
        "max_reconstruction_error": float(result.reconstruction_errors.max()),
    }


def cmd_predict(ctx: RunContext) -> dict:
    bundle = load_bundle(ctx.args.bundle)
    mesh = read_mesh(ctx.args.mesh)
    field = predict(bundle, mesh, np.asarray(ctx.args.mu, dtype=np.float64), name=f"prediction:{mesh.name}")
    write_field(ctx.out / "prediction.field", field)
    write_vtk(ctx.out / "prediction.vtk", mesh, {"prediction": field})
    return {"mesh": str(ctx.args.mesh), "nodes": mesh.node_count, "mu": list(ctx.args.mu)}


def cmd_eval(ctx: RunContext) -> dict:
    dataset = ctx.dataset()
    surrogate = ctx.config.surrogate
    if surrogate.evaluation == "loo":
        report, _ = leave_one_out(
            dataset,
            surrogate,
            ctx.config.optimizer,
            seed=ctx.seed,
            workers=ctx.workers,
            optimal_displacements=_reusable_morphings(ctx, dataset) if surrogate.loo_morphings == "shared" else None,
        )
    else:
        if surrogate.test_dataset_dir is None:
            raise ConfigError("surrogate.test_dataset_dir is required for split evaluation")
        if ctx.args.bundle is not None:
            bundle = load_bundle(ctx.args.bundle)
        else:
            bundle = train(dataset, surrogate, ctx.config.optimizer, seed=ctx.seed, workers=ctx.workers).bundle
        report, _ = evaluate_split(bundle, load_dataset(surrogate.test_dataset_dir))
    ctx.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(ctx.out / "rmse_report.csv", index=False, float_format="%.17g")
    overall = report.iloc[-1]
    return {"evaluation": surrogate.evaluation, "rmse": float(overall["rmse"]), "mean_relative_l2": float(overall["relative_l2"])}


COMMANDS: dict[str, Callable[[RunContext], dict]] = {
    "gen-toy": cmd_gen_toy,
    "optimize": cmd_optimize,
    "checkpoint-resume": cmd_checkpoint_resume,
    "pod": cmd_pod,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def write_manifest(ctx: RunContext, status: int, started: float, summary: dict | None, error: str | None) -> Path:
    payload = {
        "command": ctx.command,
        "config_hash": ctx.config.digest(),
        "config": json.loads(ctx.config.canonical_json()),
        "versions": {
            "morphopt": APP_VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
        "seed": ctx.seed,
        "workers": ctx.workers,
        "wall_time_seconds": time.perf_counter() - started,
        "exit_status": status,
        "summary": summary,
        "error": error,
    }
    return _write_json(ctx.out / MANIFEST_FILE, payload)


def main(argv: list[str] | None = None) -> int:
    settings = get_settings()
    logger.remove()
    logger.add(sys.stderr, level=settings.log_level.upper())
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        ctx = _resolve(args, settings)
    except ConfigError as exc:
        logger.error("{}", exc)
        return exc.exit_code

    ctx.out.mkdir(parents=True, exist_ok=True)
    sink = logger.add(ctx.out / "run.log", level=settings.log_level.upper())
    logger.info("morphopt {} {} (config {}, workers={}, seed={})", APP_VERSION, ctx.command, ctx.config.digest()[:12], ctx.workers, ctx.seed)
    summary = None
    error = None
    try:
        summary = COMMANDS[ctx.command](ctx)
        status = 0
    except MorphOptError as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        error = f"{type(exc).__name__}: {exc}"
        status = exc.exit_code
    except (ValueError, OSError) as exc:
        logger.error("Invalid input: {}", exc)
        error = f"{type(exc).__name__}: {exc}"
        status = ConfigError.exit_code
    write_manifest(ctx, status, started, summary, error)
    logger.remove(sink)
    return status


if __name__ == "__main__":
    sys.exit(main())
