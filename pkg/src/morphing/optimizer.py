from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from loguru import logger

from src.datasets.dataset import Sample, SnapshotDataset
from src.errors import BacktrackingExhaustedError, ConfigError
from src.fem.assembly import ElasticityOperators
from src.fem.solvers import SparseSolver
from src.mesh.locator import PointLocator
from src.mesh.triangle_mesh import MorphingState, NodalField, TriangleMesh, signed_areas
from src.morphing.boundary import BoundaryCorrespondence
from src.morphing.energies import NeoHookeanEnergy
from src.morphing.sensitivity import MorphedSnapshots, Sensitivity, SnapshotEvaluator, compute_sensitivity
from src.parallel import ordered_map
from src.schemas.run_config import OptimizerConfig, PenaltyKind

TRACE_COLUMNS = ["iter", "J", "I", "c1", "c2", "min_area", "max_normal_violation", "step"]
ROUNDOFF = 1e-13
STATIONARY_GAIN = 1e-9


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    J: float
    I: float
    c1: float
    c2: float
    min_area: float
    max_normal_violation: float
    step: float


@dataclass
class OptimizerTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(record) for record in self.records], columns=list(TraceRecord.__dataclass_fields__))
        return frame.rename(columns={"iteration": "iter"})[TRACE_COLUMNS]

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> OptimizerTrace:
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = set(TRACE_COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"{path}: trace is missing column(s) {sorted(missing)}")
        records = [
            TraceRecord(
                iteration=int(row["iter"]),
                J=float(row["J"]),
                I=float(row["I"]),
                c1=float(row["c1"]),
                c2=float(row["c2"]),
                min_area=float(row["min_area"]),
                max_normal_violation=float(row["max_normal_violation"]),
                step=float(row["step"]),
            )
            for _, row in frame.iterrows()
        ]
        return cls(records=records)


@dataclass(frozen=True, eq=False)
class MorphingFamily:
    """n displacement fields on the reference mesh; phi_i = Id + displacements[i] maps onto targets[i]."""

    reference: TriangleMesh
    displacements: np.ndarray
    targets: list[TriangleMesh]

    @property
    def size(self) -> int:
        return len(self.displacements)

    def state(self, index: int) -> MorphingState:
        return MorphingState(reference=self.reference, displacement=self.displacements[index], target=self.targets[index])

    def inverted(self) -> dict[int, list[int]]:
        found = {}
        for index, displacement in enumerate(self.displacements):
            areas = signed_areas(self.reference.nodes + displacement, self.reference.triangles)
            bad = np.flatnonzero(areas <= 0.0)
            if len(bad):
                found[index] = bad.tolist()
        return found

    def min_area(self) -> float:
        return min_deformed_area(self.reference, self.displacements)


def min_deformed_area(reference: TriangleMesh, displacements: np.ndarray) -> float:
    return float(min(signed_areas(reference.nodes + d, reference.triangles).min() for d in displacements))


@dataclass
class ContinuationState:
    """Current c1 and c2 and which of them the next alternating continuation event moves.

    c2 = inf means the snapshots are no longer smoothed. ``since_event`` counts
    accepted iterations since the last event; a stagnation phase yields one event.
    Once c1 falls below its floor it is frozen and the ascent goes on.
    """

    c1: float
    c2: float
    next_event: str = "c1"
    c1_exhausted: bool = False
    since_event: int = 0

    @classmethod
    def initial(cls, config: OptimizerConfig) -> ContinuationState:
        c2 = config.continuation_c2.start if config.continuation_c2.enabled else math.inf
        return cls(c1=config.c1, c2=c2)

    @property
    def smoothing(self) -> float | None:
        return None if math.isinf(self.c2) else self.c2

    def _candidates(self, config: OptimizerConfig) -> list[str]:
        moving = []
        if config.continuation_c1.enabled and not self.c1_exhausted:
            moving.append("c1")
        if config.continuation_c2.enabled and not math.isinf(self.c2):
            moving.append("c2")
        return moving

    def settled(self, config: OptimizerConfig) -> bool:
        """No c2 smoothing is left to remove."""
        return not (config.continuation_c2.enabled and not math.isinf(self.c2))

    def update(self, config: OptimizerConfig, previous_J: float, current_J: float) -> str | None:
        """Apply one continuation event when the relative change of J falls below the trigger.

        An event needs at least ``min_interval`` accepted iterations since the
        previous one, so a single flat stretch of J cannot cascade c1 to its floor.
        """
        self.since_event += 1
        moving = self._candidates(config)
        if not moving:
            return None
        event = self.next_event if self.next_event in moving else moving[0]
        schedule = config.continuation_c1 if event == "c1" else config.continuation_c2
        if self.since_event < schedule.min_interval:
            return None
        change = abs(current_J - previous_J) / max(abs(current_J), 1e-300)
        if change >= schedule.trigger:
            return None
        if event == "c1":
            self.c1 *= config.continuation_c1.factor
            if self.c1 < config.continuation_c1.floor:
                self.c1_exhausted = True
                logger.info("Continuation: c1 -> {:.3e}, below the floor; c1 is frozen", self.c1)
            else:
                logger.info("Continuation: c1 -> {:.6e}", self.c1)
        else:
            self.c2 *= config.continuation_c2.growth
            if self.c2 > config.continuation_c2.maximum:
                self.c2 = math.inf
                logger.info("Continuation: smoothing switched off")
            else:
                logger.info("Continuation: c2 -> {:.6e}", self.c2)
        if len(moving) == 2:
            self.next_event = "c2" if event == "c1" else "c1"
        self.since_event = 0
        return event


@dataclass(frozen=True)
class Evaluation:
    """Objective state at one morphing family for fixed c2."""

    displacements: np.ndarray
    sensitivity: Sensitivity
    energies: np.ndarray
    c2: float | None

    @property
    def J(self) -> float:
        return self.sensitivity.J

    def I(self, c1: float) -> float:
        return self.J - c1 * float(np.sum(self.energies)) if np.all(np.isfinite(self.energies)) else -math.inf


@dataclass(frozen=True)
class StepResult:
    evaluation: Evaluation
    step: float
    attempts: int
    ascent: float
    directions: np.ndarray
    max_normal_violation: float


@dataclass
class OptimizationResult:
    family: MorphingFamily
    trace: OptimizerTrace
    continuation: ContinuationState
    initial_J: float
    final_J: float
    iterations: int
    reason: str
    evaluation: Evaluation

    @property
    def eigenvalue_fractions(self) -> np.ndarray:
        return self.evaluation.sensitivity.pod.energy_fractions()

    @property
    def first_inversion(self) -> int | None:
        """First traced iteration whose morphings invert a triangle; folds may relax again later."""
        for record in self.trace.records:
            if record.min_area <= 0.0:
                return record.iteration
        return None


class MorphingOptimizer:
    """Riesz-preconditioned gradient ascent of I_r = J_r - c1 sum_i E(phi_i) over a morphing family.

    The facet-invariant case (every sample domain is the polygonal reference)
    uses one elasticity operator factorized once; with the linear penalty and
    ``polytopal_fast_path`` the penalty enters in closed form as -c1 (phi - Id).
    Otherwise the operator is reassembled per snapshot from the deformed boundary.
    """

    def __init__(self, dataset: SnapshotDataset, config: OptimizerConfig, workers: int = 1):
        self.dataset = dataset
        self.config = config
        self.workers = workers
        self.reference = dataset.reference
        if config.r > dataset.size:
            raise ConfigError(f"optimizer.r={config.r} exceeds the number of snapshots ({dataset.size})")
        self.facet_invariant = dataset.shares_reference() and self.reference.facets_are_straight()
        if config.polytopal_fast_path and not self.facet_invariant:
            raise ConfigError("polytopal_fast_path requires every sample domain to be the polygonal reference domain")
        self.fast_path = config.polytopal_fast_path
        self.evaluator = SnapshotEvaluator(dataset, config.quadrature_degree, workers)
        self.operators = ElasticityOperators(self.reference, config.elastic, self.facet_invariant)
        self.neo_hookean = (
            NeoHookeanEnergy(config.mu, config.lame_lambda, config.neo_hookean_dimension)
            if config.penalty_kind is PenaltyKind.neo_hookean
            else None
        )
        correspondences: dict[int, BoundaryCorrespondence] = {}
        self.correspondences = []
        for sample in dataset.samples:
            key = id(sample.mesh)
            if key not in correspondences:
                correspondences[key] = BoundaryCorrespondence(self.reference, sample.mesh)
            self.correspondences.append(correspondences[key])
        self._solver: SparseSolver | None = None
        self.bijectivity_guard = config.bijectivity_guard

    @property
    def size(self) -> int:
        return self.dataset.size

    @property
    def targets(self) -> list[TriangleMesh]:
        return [sample.mesh for sample in self.dataset.samples]

    def fixed_solver(self) -> SparseSolver:
        if self._solver is None:
            self._solver = SparseSolver(self.operators.fixed(), backend=self.config.solver)
        return self._solver

    def _penalty_operator(self):
        return self.operators.fixed() if self.facet_invariant else self.operators.bulk

    def penalty_energies(self, displacements: np.ndarray) -> np.ndarray:
        kind = self.config.penalty_kind
        if kind is PenaltyKind.none:
            return np.zeros(self.size)
        if kind is PenaltyKind.linear:
            operator = self._penalty_operator()
            flat = displacements.reshape(self.size, -1)
            return 0.5 * np.einsum("ij,ij->i", flat, (operator @ flat.T).T)
        return np.array([self.neo_hookean.value(self.reference, d) for d in displacements])

    def penalty_gradients(self, displacements: np.ndarray) -> np.ndarray:
        kind = self.config.penalty_kind
        if kind is PenaltyKind.none:
            return np.zeros_like(displacements)
        if kind is PenaltyKind.linear:
            flat = displacements.reshape(self.size, -1)
            return (self._penalty_operator() @ flat.T).T.reshape(displacements.shape)
        return np.stack([self.neo_hookean.gradient(self.reference, d) for d in displacements])

    def evaluate(self, displacements: np.ndarray, c2: float | None = None) -> Evaluation:
        snapshots: MorphedSnapshots = self.evaluator.evaluate(displacements, c2)
        sensitivity = compute_sensitivity(self.evaluator, snapshots, self.config.r)
        return Evaluation(
            displacements=displacements, sensitivity=sensitivity, energies=self.penalty_energies(displacements), c2=c2
        )

    def directions(self, evaluation: Evaluation, c1: float) -> tuple[np.ndarray, float]:
        """Riesz representatives of DI_r per snapshot and the total ascent rate sum_i a(g_i, g_i)."""
        displacements = evaluation.displacements
        loads = evaluation.sensitivity.loads
        penalty = self.penalty_gradients(displacements) if c1 > 0.0 else np.zeros_like(displacements)
        rhs = loads - c1 * penalty
        if self.facet_invariant:
            solver = self.fixed_solver()
            if self.fast_path:
                riesz = solver.solve(loads.reshape(self.size, -1).T).T.reshape(displacements.shape)
                directions = riesz - c1 * displacements
            else:
                directions = solver.solve(rhs.reshape(self.size, -1).T).T.reshape(displacements.shape)
        else:

            def solve_one(index: int) -> np.ndarray:
                operator = self.operators.general(displacements[index])
                return SparseSolver(operator, backend=self.config.solver).solve(rhs[index].reshape(-1)).reshape(-1, 2)

            directions = np.stack(ordered_map(solve_one, range(self.size), self.workers))
        ascent = float(np.sum(rhs * directions))
        scale = float(np.linalg.norm(rhs) * np.linalg.norm(directions))
        if ascent < -1e-10 * max(scale, 1e-300):
            logger.warning("Riesz direction is not an ascent direction (a-norm {:.3e})", ascent)
        return directions, ascent

    def _inverts(self, displacements: np.ndarray) -> bool:
        return min_deformed_area(self.reference, displacements) <= 0.0

    def max_normal_violation(self, displacements: np.ndarray) -> float:
        return max(correspondence.max_drift(d) for correspondence, d in zip(self.correspondences, displacements))

    def safeguard(self, displacements: np.ndarray) -> tuple[np.ndarray, int]:
        tolerance = self.config.safeguard_tolerance * self.reference.diameter
        corrected = displacements.copy()
        moved = 0
        for index, correspondence in enumerate(self.correspondences):
            corrected[index], count = correspondence.correct(displacements[index], tolerance)
            moved += count
        return corrected, moved

    def project(self, displacements: np.ndarray) -> np.ndarray:
        """Safeguard projection onto the boundary, applied only once the drift exceeds the tolerance."""
        if self.max_normal_violation(displacements) <= self.config.safeguard_tolerance * self.reference.diameter:
            return displacements
        corrected, moved = self.safeguard(displacements)
        return corrected if moved else displacements

    def ascent_step(
        self, evaluation: Evaluation, continuation: ContinuationState, trace: OptimizerTrace | None = None
    ) -> StepResult:
        """One accepted update phi_i <- phi_i + step * g_i with backtracking on inversion or decrease of I_r.

        The acceptance test runs on the candidate after the safeguard projection.
        """
        c1 = continuation.c1
        current = evaluation.I(c1)
        directions, ascent = self.directions(evaluation, c1)
        step = self.config.step
        for attempt in range(self.config.max_backtracks + 1):
            candidate = self.project(evaluation.displacements + step * directions)
            if not (self.bijectivity_guard and self._inverts(candidate)):
                trial = self.evaluate(candidate, evaluation.c2)
                if trial.I(c1) >= current - ROUNDOFF * max(1.0, abs(current)):
                    break
            step *= 0.5
        else:
            stationary = ascent * self.config.step <= STATIONARY_GAIN * max(1.0, abs(current))
            raise BacktrackingExhaustedError(trace, stationary=stationary, attempts=self.config.max_backtracks)

        return StepResult(
            evaluation=trial,
            step=step,
            attempts=attempt,
            ascent=ascent,
            directions=directions,
            max_normal_violation=self.max_normal_violation(trial.displacements),
        )

    def _unsmoothed(self, evaluation: Evaluation) -> Evaluation:
        return evaluation if evaluation.c2 is None else self.evaluate(evaluation.displacements)

    def is_stationary(self, evaluation: Evaluation, c1: float) -> bool:
        if not evaluation.sensitivity.stationary:
            return False
        if c1 == 0.0 or self.config.penalty_kind is PenaltyKind.none:
            return True
        return bool(np.max(np.abs(self.penalty_gradients(evaluation.displacements)), initial=0.0) <= 1e-12)

    def optimize(
        self,
        initial: np.ndarray | None = None,
        continuation: ContinuationState | None = None,
        start_iteration: int = 0,
        trace: OptimizerTrace | None = None,
        on_iteration: Callable[[int, np.ndarray, ContinuationState, float], None] | None = None,
    ) -> OptimizationResult:
        displacements = (
            np.zeros((self.size, self.reference.node_count, 2)) if initial is None else np.array(initial, dtype=np.float64)
        )
        if self.bijectivity_guard and self._inverts(displacements):
            raise ValueError("initial morphings must be bijective")
        continuation = continuation or ContinuationState.initial(self.config)
        trace = OptimizerTrace() if trace is None else trace
        evaluation = self.evaluate(displacements, continuation.smoothing)
        initial_J = self._unsmoothed(evaluation).J
        logger.info(
            "Optimizing {} morphing(s) of {} (r={}, penalty={}, fast path={}), initial 1-J={:.6e}",
            self.size,
            self.reference.name,
            self.config.r,
            self.config.penalty_kind.value,
            self.fast_path,
            1.0 - initial_J,
        )

        reason = "max_iters"
        iteration = start_iteration
        while iteration < self.config.max_iters:
            if self.is_stationary(evaluation, continuation.c1):
                reason = "stationary"
                break
            iteration += 1
            try:
                result = self.ascent_step(evaluation, continuation, trace)
            except BacktrackingExhaustedError as exc:
                exc.trace = trace
                if exc.stationary:
                    reason = "stationary"
                    iteration -= 1
                    break
                raise
            accepted = result.evaluation
            trace.append(
                TraceRecord(
                    iteration=iteration,
                    J=accepted.J,
                    I=accepted.I(continuation.c1),
                    c1=continuation.c1,
                    c2=continuation.c2,
                    min_area=min_deformed_area(self.reference, accepted.displacements),
                    max_normal_violation=result.max_normal_violation,
                    step=result.step,
                )
            )
            logger.debug("iter {} J={:.12f} step={:.3e}", iteration, accepted.J, result.step)
            event = continuation.update(self.config, evaluation.J, accepted.J)
            evaluation = accepted
            if event == "c2":
                evaluation = self.evaluate(accepted.displacements, continuation.smoothing)
            if on_iteration is not None:
                on_iteration(iteration, evaluation.displacements, continuation, result.step)
            if (
                self.config.rel_tol > 0.0
                and event is None
                and continuation.settled(self.config)
                and 1.0 - evaluation.J < self.config.rel_tol
            ):
                reason = "converged"
                break

        final = self._unsmoothed(evaluation)
        logger.info(
            "Stopped after {} iteration(s) ({}): 1-J={:.6e}, elasticity assemblies={}",
            iteration,
            reason,
            1.0 - final.J,
            self.operators.assembly_count,
        )
        family = MorphingFamily(reference=self.reference, displacements=evaluation.displacements, targets=self.targets)
        return OptimizationResult(
            family=family,
            trace=trace,
            continuation=continuation,
            initial_J=initial_J,
            final_J=final.J,
            iterations=iteration,
            reason=reason,
            evaluation=final,
        )


def optimize(dataset: SnapshotDataset, config: OptimizerConfig, workers: int = 1, **kwargs) -> OptimizationResult:
    return MorphingOptimizer(dataset, config, workers=workers).optimize(**kwargs)


def transfer_displacement(coarse: TriangleMesh, displacement: np.ndarray, fine: TriangleMesh) -> np.ndarray:
    """P1 interpolation of a coarse-mesh displacement at the fine-mesh nodes."""
    location = PointLocator(coarse).locate(fine.nodes)
    return location.interpolate(coarse, np.asarray(displacement, dtype=np.float64))


def restrict_to_mesh(dataset: SnapshotDataset, coarse: TriangleMesh) -> SnapshotDataset:
    """Snapshots interpolated at the nodes of a coarse mesh of the reference domain."""
    if not dataset.shares_reference():
        raise ConfigError("coarse-mesh optimization needs every sample on the reference domain")
    location = PointLocator(dataset.reference).locate(coarse.nodes)
    samples = [
        Sample(
            name=sample.name,
            mesh=coarse,
            field=NodalField(mesh=coarse, values=location.interpolate(sample.mesh, sample.field.values), name=sample.name),
            mu=sample.mu,
        )
        for sample in dataset.samples
    ]
    logger.info("Restricted {} snapshot(s) to {} ({} nodes)", dataset.size, coarse.name, coarse.node_count)
    return SnapshotDataset(reference=coarse, samples=samples, parameter_names=dataset.parameter_names)
