from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np
from loguru import logger

from src.datasets.dataset import SnapshotDataset
from src.errors import MeshError
from src.fem.solvers import FieldSmoother
from src.mesh.locator import PointLocator
from src.mesh.quadrature import MeshQuadrature, quadrature_rule
from src.parallel import ordered_map
from src.pod.compress import PodResult, SnapshotFamily, correlation_matrix, pod

STATIONARY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class MorphedSnapshots:
    """Values u_i(phi_i(x_q)) and P1 gradients (grad u_i)(phi_i(x_q)) at the reference quadrature points."""

    values: np.ndarray
    gradients: np.ndarray
    clamped: int


@dataclass(frozen=True)
class Sensitivity:
    """Everything the ascent needs at one morphing family: POD, J_r, f_i at quadrature points and nodal loads."""

    snapshots: MorphedSnapshots
    pod: PodResult
    r: int
    J: float
    coefficients: np.ndarray
    fields: np.ndarray
    loads: np.ndarray

    @property
    def stationary(self) -> bool:
        return bool(np.max(np.abs(self.fields), initial=0.0) <= STATIONARY_TOLERANCE)


class SnapshotEvaluator:
    """Pulls the dataset snapshots back to the reference quadrature points through a morphing family.

    Each sample domain gets one point locator (shared between samples on the
    same mesh). The last containing triangles per sample warm-start the next
    walk. Smoothed snapshot values are cached per c2.
    """

    def __init__(self, dataset: SnapshotDataset, quadrature_degree: int = 4, workers: int = 1):
        self.dataset = dataset
        self.reference = dataset.reference
        self.quadrature = MeshQuadrature(self.reference, quadrature_rule(quadrature_degree))
        self.workers = workers
        self._locators: dict[int, PointLocator] = {}
        for sample in dataset.samples:
            if id(sample.mesh) not in self._locators:
                self._locators[id(sample.mesh)] = PointLocator(sample.mesh)
        self._raw = [sample.field.values for sample in dataset.samples]
        self._smoothed: dict[float, list[np.ndarray]] = {}
        self._hints: list[np.ndarray | None] = [None] * dataset.size
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return self.dataset.size

    def locator(self, index: int) -> PointLocator:
        return self._locators[id(self.dataset.samples[index].mesh)]

    def snapshot_values(self, c2: float | None = None) -> list[np.ndarray]:
        """Nodal snapshot values on their own meshes, smoothed with -lap + c2 when c2 is finite."""
        if c2 is None or math.isinf(c2):
            return self._raw
        with self._lock:
            if c2 not in self._smoothed:
                smoothed: list[np.ndarray | None] = [None] * self.size
                groups: dict[int, list[int]] = {}
                for index, sample in enumerate(self.dataset.samples):
                    groups.setdefault(id(sample.mesh), []).append(index)
                for indices in groups.values():
                    smoother = FieldSmoother(self.dataset.samples[indices[0]].mesh, c2)
                    block = smoother.smooth(np.column_stack([self._raw[i] for i in indices]))
                    for column, index in enumerate(indices):
                        smoothed[index] = block[:, column]
                self._smoothed[c2] = smoothed
                logger.info("Smoothed {} snapshot(s) with c2={:g}", self.size, c2)
            return self._smoothed[c2]

    def evaluate(self, displacements: np.ndarray, c2: float | None = None) -> MorphedSnapshots:
        displacements = np.asarray(displacements, dtype=np.float64)
        if displacements.shape != (self.size, self.reference.node_count, 2):
            raise MeshError(
                f"expected displacements of shape {(self.size, self.reference.node_count, 2)}, got {displacements.shape}"
            )
        fields = self.snapshot_values(c2)
        positions = self.quadrature.positions

        def pull_back(index: int) -> tuple[np.ndarray, np.ndarray, int]:
            mesh = self.dataset.samples[index].mesh
            locator = self.locator(index)
            points = positions + self.quadrature.sample(displacements[index])
            location = locator.locate(points, hint=self._hints[index])
            self._hints[index] = location.triangles
            values = location.interpolate(mesh, fields[index])
            gradients = mesh.field_gradients(fields[index])[location.triangles]
            return values, gradients, int(location.clamped.sum())

        results = ordered_map(pull_back, range(self.size), self.workers)
        clamped = sum(item[2] for item in results)
        if clamped:
            logger.debug("{} quadrature point(s) clamped to target boundaries", clamped)
        return MorphedSnapshots(
            values=np.stack([item[0] for item in results]),
            gradients=np.stack([item[1] for item in results]),
            clamped=clamped,
        )

    def family(self, snapshots: MorphedSnapshots) -> SnapshotFamily:
        return SnapshotFamily.at_quadrature(self.quadrature, snapshots.values)


def sensitivity_coefficients(result: PodResult, r: int) -> np.ndarray:
    """A_ij = sum_{k<=r} 2 z_ki z_kj / tr C - 2 lambda_k delta_ij / tr C^2."""
    leading = result.eigenvectors[:, :r]
    captured = float(np.sum(result.eigenvalues[:r]))
    return 2.0 * (leading @ leading.T) / result.trace - 2.0 * captured / result.trace**2 * np.eye(result.size)


def sensitivity_fields(snapshots: MorphedSnapshots, result: PodResult, r: int) -> np.ndarray:
    """f_i at every quadrature point, shape (n, Q, 2)."""
    if snapshots.values.shape[0] != result.size:
        raise ValueError(f"family has {snapshots.values.shape[0]} snapshots, POD has {result.size}")
    mixed = sensitivity_coefficients(result, r) @ snapshots.values
    return mixed[:, :, None] * snapshots.gradients


def compute_sensitivity(evaluator: SnapshotEvaluator, snapshots: MorphedSnapshots, r: int) -> Sensitivity:
    family = evaluator.family(snapshots)
    result = pod(correlation_matrix(family), r)
    J = result.efficiency(r)
    fields = sensitivity_fields(snapshots, result, r)
    loads = np.stack([evaluator.quadrature.load_vector(field) for field in fields])
    return Sensitivity(
        snapshots=snapshots,
        pod=result,
        r=r,
        J=J,
        coefficients=sensitivity_coefficients(result, r),
        fields=fields,
        loads=loads,
    )


def differential_J(sensitivity: Sensitivity, directions: np.ndarray) -> float:
    """DJ_r[Phi][Psi] as the sum of L2 pairings of f_i with psi_i."""
    return float(np.sum(sensitivity.loads * np.asarray(directions)))


def differential_J_double_sum(evaluator: SnapshotEvaluator, sensitivity: Sensitivity, directions: np.ndarray) -> float:
    """DJ_r from the eigenvalue perturbation identities: sum_k z_k^T DC z_k / tr C - sum lambda / tr C^2 * tr DC."""
    snapshots = sensitivity.snapshots
    result = sensitivity.pod
    r = sensitivity.r
    weights = evaluator.quadrature.weights
    psi = np.stack([evaluator.quadrature.sample(direction) for direction in np.asarray(directions)])
    transport = np.einsum("iqd,iqd->iq", snapshots.gradients, psi)
    # mixed[j, i] = <u_j, grad u_i . psi_i>
    mixed = (snapshots.values * weights[None, :]) @ transport.T
    derivative = mixed + mixed.T
    leading = result.eigenvectors[:, :r]
    captured = float(np.sum(result.eigenvalues[:r]))
    return float(
        np.trace(leading.T @ derivative @ leading) / result.trace - captured / result.trace**2 * np.trace(derivative)
    )


def objective(evaluator: SnapshotEvaluator, displacements: np.ndarray, r: int, c2: float | None = None) -> float:
    snapshots = evaluator.evaluate(displacements, c2)
    return pod(correlation_matrix(evaluator.family(snapshots)), r).efficiency(r)


def multiscale_objective(evaluator: SnapshotEvaluator, displacements: np.ndarray, r: int, c2: float) -> float:
    """J_r of the snapshots smoothed at level c2 and pulled back through the morphings."""
    if not c2 > 0.0:
        raise ValueError(f"c2 must be positive, got {c2}")
    return objective(evaluator, displacements, r, c2)
