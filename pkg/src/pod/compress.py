from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy import linalg, sparse

from src.errors import DegenerateSnapshotsError, MeshError
from src.fem.assembly import assemble_mass
from src.mesh.io import LineReader
from src.mesh.quadrature import MeshQuadrature
from src.mesh.triangle_mesh import NodalField, TriangleMesh

RANK_TOLERANCE = 1e-12
CLUSTER_TOLERANCE = 1e-10
NEGATIVE_TOLERANCE = 1e-10
POD_HEADER = "MORPHPOD v1"


@dataclass(frozen=True, eq=False)
class SnapshotFamily:
    """n snapshots on one reference mesh, flattened to rows, with the weight operator of their L2 product.

    Nodal families use the consistent mass matrix (vector fields interleaved as
    2 * node + component); quadrature families carry values at the quadrature
    points of the reference mesh and a diagonal weight.
    """

    mesh: TriangleMesh
    values: np.ndarray
    weight: sparse.spmatrix | np.ndarray
    components: int = 1

    def __post_init__(self) -> None:
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if len(values) == 0:
            raise ValueError("a snapshot family needs at least one snapshot")
        width = self.weight.shape[0]
        if values.shape[1] != width:
            raise MeshError(f"snapshots have {values.shape[1]} entries, weight operator expects {width}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_fields(cls, mesh: TriangleMesh, fields: list[NodalField]) -> SnapshotFamily:
        if not fields:
            raise ValueError("a snapshot family needs at least one snapshot")
        components = fields[0].components
        for field in fields:
            if field.mesh is not mesh and field.mesh.node_count != mesh.node_count:
                raise MeshError(f"field {field.name!r} does not live on reference mesh {mesh.name!r}")
            if field.components != components:
                raise MeshError("all snapshots of a family must have the same component count")
        values = np.stack([field.values.reshape(-1) for field in fields])
        return cls(mesh=mesh, values=values, weight=assemble_mass(mesh, components), components=components)

    @classmethod
    def from_nodal(cls, mesh: TriangleMesh, values: np.ndarray, mass: sparse.spmatrix | None = None) -> SnapshotFamily:
        """Rows of shape (N,) or (N, 2) per snapshot; ``mass`` may be passed to reuse an assembled matrix."""
        values = np.asarray(values, dtype=np.float64)
        components = 1 if values.ndim == 2 else values.shape[2]
        if mass is None:
            mass = assemble_mass(mesh, components)
        return cls(mesh=mesh, values=values.reshape(len(values), -1), weight=mass, components=components)

    @classmethod
    def at_quadrature(cls, quadrature: MeshQuadrature, values: np.ndarray) -> SnapshotFamily:
        return cls(mesh=quadrature.mesh, values=values, weight=quadrature.weights)

    @property
    def size(self) -> int:
        return len(self.values)

    def apply_weight(self, rows: np.ndarray) -> np.ndarray:
        """W applied to each row of ``rows`` (shape (m, K))."""
        if isinstance(self.weight, np.ndarray):
            return rows * self.weight[None, :]
        return (self.weight @ rows.T).T

    def inner(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        return np.atleast_2d(left) @ self.apply_weight(np.atleast_2d(right)).T

    def as_fields(self, name: str = "snapshot") -> list[NodalField]:
        shape = (-1,) if self.components == 1 else (-1, 2)
        return [NodalField(mesh=self.mesh, values=row.reshape(shape), name=f"{name}_{i}") for i, row in enumerate(self.values)]


@dataclass(frozen=True)
class PodResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    modes: np.ndarray | None
    trace: float
    rank: int

    @property
    def size(self) -> int:
        return len(self.eigenvalues)

    def energy_fractions(self) -> np.ndarray:
        _require_energy(self.trace)
        return self.eigenvalues / self.trace

    def efficiency(self, r: int) -> float:
        _check_rank(r, self.size)
        _require_energy(self.trace)
        return float(np.sum(self.eigenvalues[:r]) / self.trace)


def _require_energy(trace: float) -> None:
    if not trace > 0.0:
        raise DegenerateSnapshotsError("trace of the correlation matrix is zero (all snapshots vanish)")


def _check_rank(r: int, n: int) -> None:
    if not 1 <= r <= n:
        raise ValueError(f"r must satisfy 1 <= r <= {n}, got {r}")


def correlation_matrix(family: SnapshotFamily) -> np.ndarray:
    gram = family.inner(family.values, family.values)
    return 0.5 * (gram + gram.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    vectors = vectors.copy()
    for k in range(vectors.shape[1]):
        column = vectors[:, k]
        significant = np.flatnonzero(np.abs(column) > 1e-12 * max(np.max(np.abs(column)), 1e-300))
        if len(significant) and column[significant[0]] < 0.0:
            vectors[:, k] = -column
    return vectors


def pod(correlation: np.ndarray, r: int, family: SnapshotFamily | None = None) -> PodResult:
    """Eigendecomposition of the correlation matrix, sorted nonincreasing, with modes when a family is given.

    Eigenvectors are signed so their first significant entry is positive.
    Modes are only built for eigenvalues above the rank tolerance.
    """
    correlation = np.asarray(correlation, dtype=np.float64)
    n = correlation.shape[0]
    if correlation.shape != (n, n):
        raise ValueError(f"correlation matrix must be square, got {correlation.shape}")
    _check_rank(r, n)
    values, vectors = linalg.eigh(0.5 * (correlation + correlation.T))
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = _fix_signs(vectors[:, order])

    trace = float(np.trace(correlation))
    if np.any(values < -NEGATIVE_TOLERANCE * max(abs(trace), 1.0)):
        logger.warning("correlation matrix has eigenvalue {:.3e} below the negative tolerance", float(values.min()))
    values = np.clip(values, 0.0, None)

    if r < n and trace > 0.0 and abs(values[r - 1] - values[r]) <= CLUSTER_TOLERANCE * trace:
        logger.warning("r={} splits a cluster of eigenvalues ({:.6e}, {:.6e}); DJ_r may be ill-defined", r, values[r - 1], values[r])

    rank = int(np.sum(values > RANK_TOLERANCE * trace)) if trace > 0.0 else 0
    if rank < n:
        logger.debug("correlation matrix has numerical rank {} of {}", rank, n)
    modes = None
    if family is not None:
        if family.size != n:
            raise ValueError(f"family has {family.size} snapshots, correlation matrix has {n}")
        modes = (vectors[:, :rank].T @ family.values) / np.sqrt(values[:rank])[:, None]
    return PodResult(eigenvalues=values, eigenvectors=vectors, modes=modes, trace=trace, rank=rank)


def efficiency(correlation: np.ndarray, r: int) -> float:
    """Fraction of the snapshot energy captured by the first r POD modes."""
    correlation = np.asarray(correlation, dtype=np.float64)
    _check_rank(r, correlation.shape[0])
    trace = float(np.trace(correlation))
    _require_energy(trace)
    values = np.clip(linalg.eigh(0.5 * (correlation + correlation.T), eigvals_only=True), 0.0, None)
    return float(np.sum(np.sort(values)[::-1][:r]) / trace)


def coordinates(family: SnapshotFamily, modes: np.ndarray) -> np.ndarray:
    modes = np.atleast_2d(modes)
    if modes.shape[1] != family.values.shape[1]:
        raise ValueError(f"modes have {modes.shape[1]} entries, snapshots have {family.values.shape[1]}")
    return family.inner(family.values, modes)


def reconstruct(coefficients: np.ndarray, modes: np.ndarray) -> np.ndarray:
    coefficients = np.atleast_2d(coefficients)
    if coefficients.shape[1] == 0:
        return np.zeros((len(coefficients), np.atleast_2d(modes).shape[1]))
    return coefficients @ np.atleast_2d(modes)[: coefficients.shape[1]]


def select_rank(result: PodResult, threshold: float, cap: int | None = None) -> int:
    """Smallest mode count reaching the energy threshold, limited by the cap and the numerical rank."""
    if result.rank == 0:
        return 0
    cumulative = np.cumsum(result.eigenvalues) / result.trace
    count = int(np.searchsorted(cumulative, threshold - 1e-15) + 1)
    count = min(count, result.rank)
    if cap is not None:
        count = min(count, cap)
    return count


def decay_table(eigenvalues: np.ndarray) -> pd.DataFrame:
    eigenvalues = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    total = float(eigenvalues.sum())
    _require_energy(total)
    fractions = eigenvalues / total
    return pd.DataFrame({"k": np.arange(1, len(eigenvalues) + 1), "fraction": fractions, "J": np.cumsum(fractions)})


def write_pod(path: str | Path, result: PodResult, count: int | None = None) -> None:
    """Eigenvalues, eigenvectors and the first ``count`` modes (all computed modes by default)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    modes = result.modes if result.modes is not None else np.zeros((0, 0))
    if count is not None:
        modes = modes[:count]
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"{POD_HEADER}\ntrace {result.trace!r}\nrank {result.rank}\n")
        handle.write(f"eigenvalues {result.size}\n")
        np.savetxt(handle, result.eigenvalues.reshape(-1, 1), fmt="%.17g")
        handle.write(f"eigenvectors {result.size}\n")
        np.savetxt(handle, result.eigenvectors, fmt="%.17g")
        handle.write(f"modes {len(modes)} {modes.shape[1] if modes.size else 0}\n")
        if modes.size:
            np.savetxt(handle, modes, fmt="%.17g")


def read_pod(path: str | Path) -> PodResult:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        reader = LineReader(path, handle)
        header = reader.next("header")
        if header != POD_HEADER:
            raise reader.error(f"expected header '{POD_HEADER}', found '{header}'")
        trace = float(reader.keyword("trace")[0])
        rank = reader.count("rank")
        size = reader.count("eigenvalues")
        eigenvalues = reader.rows(size, 1, float, "eigenvalue")[:, 0]
        vectors = reader.rows(reader.count("eigenvectors"), size, float, "eigenvector")
        mode_tokens = reader.keyword("modes")
        mode_count, width = int(mode_tokens[0]), int(mode_tokens[1])
        modes = reader.rows(mode_count, width, float, "mode") if mode_count else np.zeros((0, width))
    return PodResult(eigenvalues=eigenvalues, eigenvectors=vectors, modes=modes, trace=trace, rank=rank)
