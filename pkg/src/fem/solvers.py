from __future__ import annotations

from typing import Literal

import numpy as np
from loguru import logger
from scipy import sparse
from scipy.sparse import linalg as spla

from src.errors import MeshError, SolverConvergenceError
from src.fem.assembly import assemble_laplacian, assemble_mass
from src.mesh.triangle_mesh import NodalField, TriangleMesh

RESIDUAL_TOLERANCE = 1e-8

Backend = Literal["direct", "cg"]


def backward_error(operator: sparse.spmatrix, solution: np.ndarray, rhs: np.ndarray, operator_norm: float) -> float:
    """Normwise backward error ||b - Au|| / (||A|| ||u|| + ||b||), all in the infinity norm."""
    residual = rhs - operator @ solution
    scale = operator_norm * np.max(np.abs(solution)) + np.max(np.abs(rhs))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(residual)) / scale)


class SparseSolver:
    """Solves with one symmetric positive definite operator, many right-hand sides.

    The direct backend factorizes once (SuperLU) and applies one step of
    iterative refinement; the cg backend runs Jacobi-preconditioned conjugate
    gradients per column. Every solution is checked against the backward-error
    tolerance before it is returned.
    """

    def __init__(self, operator: sparse.spmatrix, backend: Backend = "direct", tolerance: float = RESIDUAL_TOLERANCE):
        self.operator = sparse.csr_matrix(operator)
        self.backend = backend
        self.tolerance = tolerance
        self.norm = float(spla.norm(self.operator, np.inf))
        if backend == "direct":
            self._lu = spla.splu(self.operator.tocsc())
        elif backend == "cg":
            diagonal = self.operator.diagonal()
            self._jacobi = sparse.diags(np.where(diagonal > 0.0, 1.0 / np.where(diagonal > 0.0, diagonal, 1.0), 1.0))
        else:
            raise ValueError(f"unknown solver backend {backend!r}")

    @property
    def dimension(self) -> int:
        return self.operator.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.dimension:
            raise ValueError(f"rhs has {rhs.shape[0]} rows, operator has dimension {self.dimension}")
        if not np.any(rhs):
            return np.zeros_like(rhs)
        if self.backend == "direct":
            solution = self._lu.solve(rhs)
            solution = solution + self._lu.solve(rhs - self.operator @ solution)
            iterations = 2
        else:
            columns = rhs.reshape(self.dimension, -1)
            solution = np.empty_like(columns)
            iterations = 0
            for k in range(columns.shape[1]):
                solution[:, k], info = spla.cg(
                    self.operator, columns[:, k], rtol=self.tolerance, atol=0.0, maxiter=10 * self.dimension, M=self._jacobi
                )
                iterations = max(iterations, info if info > 0 else 0)
            solution = solution.reshape(rhs.shape)
        error = backward_error(self.operator, solution, rhs, self.norm)
        if not np.isfinite(error) or error > self.tolerance:
            raise SolverConvergenceError(error, iterations)
        logger.debug("{} solve: backward error {:.2e}", self.backend, error)
        return solution


def riesz_solve(
    operator: sparse.spmatrix, rhs: NodalField, backend: Backend = "direct", solver: SparseSolver | None = None
) -> NodalField:
    """Riesz representative of the load ``rhs`` for the form ``operator`` (vector fields, interleaved dofs)."""
    if rhs.components != 2:
        raise ValueError("riesz_solve expects a two-component load")
    solver = solver or SparseSolver(operator, backend=backend)
    values = solver.solve(rhs.values.reshape(-1))
    return NodalField(mesh=rhs.mesh, values=values.reshape(-1, 2), name=f"riesz({rhs.name})")


class FieldSmoother:
    """Galerkin solver for -lap(u_hat) + c2 u_hat = c2 u with natural boundary conditions."""

    def __init__(self, mesh: TriangleMesh, c2: float):
        if not c2 > 0.0:
            raise ValueError(f"c2 must be positive, got {c2}")
        self.mesh = mesh
        self.c2 = float(c2)
        self.mass = assemble_mass(mesh)
        self._solver = SparseSolver(assemble_laplacian(mesh) + self.c2 * self.mass)

    def smooth(self, values: np.ndarray) -> np.ndarray:
        return self._solver.solve(self.c2 * (self.mass @ np.asarray(values, dtype=np.float64)))


def smooth_field(mesh: TriangleMesh, u_ref: NodalField, c2: float) -> NodalField:
    if u_ref.mesh.node_count != mesh.node_count:
        raise MeshError("field does not live on the given mesh")
    if u_ref.components != 1:
        raise ValueError("smooth_field expects a scalar field")
    smoothed = FieldSmoother(mesh, c2).smooth(u_ref.values)
    return NodalField(mesh=mesh, values=smoothed, name=f"{u_ref.name}:c2={c2:g}")
