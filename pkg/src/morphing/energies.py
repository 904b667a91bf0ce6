from __future__ import annotations

import numpy as np
from scipy import sparse

from src.fem.assembly import assemble_bulk_elasticity, assemble_elasticity
from src.mesh.triangle_mesh import MorphingState, TriangleMesh
from src.schemas.run_config import ElasticParams


def quadratic_energy(operator: sparse.spmatrix, displacement: np.ndarray) -> float:
    """Half the elasticity form of the displacement with itself."""
    flat = np.asarray(displacement, dtype=np.float64).reshape(-1)
    return 0.5 * float(flat @ (operator @ flat))


def quadratic_energy_gradient(operator: sparse.spmatrix, displacement: np.ndarray) -> np.ndarray:
    """Nodal representation of DE_lin[phi][.] = a(phi - Id, .), shape (N, 2)."""
    flat = np.asarray(displacement, dtype=np.float64).reshape(-1)
    return (operator @ flat).reshape(-1, 2)


def deformation_gradients(mesh: TriangleMesh, displacement: np.ndarray) -> np.ndarray:
    """F = I + grad(displacement) per triangle, shape (T, 2, 2)."""
    corner = np.asarray(displacement)[mesh.triangles]
    grad = np.einsum("tka,tkb->tab", corner, mesh.basis_gradients)
    return grad + np.eye(2)[None, :, :]


class NeoHookeanEnergy:
    """Compressible Neo-Hookean penalty: mu/2 (tr F^T F - d) + lam (J^2 - 1) - |lam/2 + mu| ln J.

    ``dimension`` is the constant subtracted from tr F^T F; with d = 2 the
    identity morphing of a planar domain has zero energy.
    """

    def __init__(self, mu: float, lame_lambda: float, dimension: int = 2):
        if mu <= 0.0 or lame_lambda <= 0.0:
            raise ValueError("Neo-Hookean parameters must be positive")
        self.mu = mu
        self.lame_lambda = lame_lambda
        self.dimension = dimension
        self.barrier = abs(0.5 * lame_lambda + mu)

    def density(self, f: np.ndarray) -> np.ndarray:
        j = f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] * f[:, 1, 0]
        density = np.full(len(f), np.inf)
        valid = j > 0.0
        trace = np.einsum("tab,tab->t", f[valid], f[valid])
        jv = j[valid]
        density[valid] = 0.5 * self.mu * (trace - self.dimension) + self.lame_lambda * (jv**2 - 1.0) - self.barrier * np.log(jv)
        return density

    def value(self, mesh: TriangleMesh, displacement: np.ndarray) -> float:
        density = self.density(deformation_gradients(mesh, displacement))
        if not np.all(np.isfinite(density)):
            return float("inf")
        return float(np.dot(mesh.signed_areas, density))

    def stress(self, f: np.ndarray) -> np.ndarray:
        """First Piola-Kirchhoff stress dW/dF, shape (T, 2, 2)."""
        j = f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] * f[:, 1, 0]
        # F^{-T} for 2x2: cofactor matrix divided by J
        cofactor = np.empty_like(f)
        cofactor[:, 0, 0] = f[:, 1, 1]
        cofactor[:, 0, 1] = -f[:, 1, 0]
        cofactor[:, 1, 0] = -f[:, 0, 1]
        cofactor[:, 1, 1] = f[:, 0, 0]
        inverse_transpose = cofactor / j[:, None, None]
        volumetric = 2.0 * self.lame_lambda * j**2 - self.barrier
        return self.mu * f + volumetric[:, None, None] * inverse_transpose

    def gradient(self, mesh: TriangleMesh, displacement: np.ndarray) -> np.ndarray:
        """Nodal representation of DE_NH[phi][.], shape (N, 2); undefined once an element inverts."""
        f = deformation_gradients(mesh, displacement)
        if np.any(f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] * f[:, 1, 0] <= 0.0):
            raise ValueError("Neo-Hookean gradient is undefined for inverted elements")
        stress = self.stress(f)
        element = mesh.signed_areas[:, None, None] * np.einsum("tab,tkb->tka", stress, mesh.basis_gradients)
        out = np.zeros((mesh.node_count, 2))
        np.add.at(out, mesh.triangles.reshape(-1), element.reshape(-1, 2))
        return out


def energy_linear(state: MorphingState, elastic: ElasticParams, penalized: bool = True) -> float:
    """E_lin = 1/2 a(phi - Id, phi - Id); the boundary-normal penalty on the reference boundary is included when ``penalized``."""
    operator = assemble_elasticity(state.reference, elastic) if penalized else assemble_bulk_elasticity(state.reference, elastic)
    return quadratic_energy(operator, state.displacement)


def energy_neohookean(state: MorphingState, mu: float, lame_lambda: float, dimension: int = 2) -> float:
    return NeoHookeanEnergy(mu, lame_lambda, dimension).value(state.reference, state.displacement)
