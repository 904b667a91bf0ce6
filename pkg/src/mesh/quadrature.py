from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from src.errors import MeshError
from src.mesh.triangle_mesh import NodalField, TriangleMesh


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights (summing to 1, relative to triangle area)."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


def _symmetric_orbit(a: float) -> np.ndarray:
    b = 1.0 - 2.0 * a
    return np.array([[b, a, a], [a, b, a], [a, a, b]])


DUNAVANT_1 = QuadratureRule(points=np.array([[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]), weights=np.array([1.0]), degree=1)

DUNAVANT_2 = QuadratureRule(
    points=_symmetric_orbit(1.0 / 6.0),
    weights=np.full(3, 1.0 / 3.0),
    degree=2,
)

DUNAVANT_4 = QuadratureRule(
    points=np.vstack([_symmetric_orbit(0.445948490915964886318329253), _symmetric_orbit(0.091576213509770743459571463)]),
    weights=np.concatenate(
        [np.full(3, 0.223381589678011465944827557), np.full(3, 0.109951743655321867388505776)]
    ),
    degree=4,
)

_RULES = {1: DUNAVANT_1, 2: DUNAVANT_2, 4: DUNAVANT_4}


def quadrature_rule(degree: int) -> QuadratureRule:
    for available in sorted(_RULES):
        if available >= degree:
            return _RULES[available]
    raise ValueError(f"no quadrature rule of degree {degree}; available: {sorted(_RULES)}")


@dataclass(frozen=True, eq=False)
class MeshQuadrature:
    """All quadrature points of a mesh: physical positions, absolute weights and the P1 sampling operator."""

    mesh: TriangleMesh
    rule: QuadratureRule

    @cached_property
    def triangle_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.mesh.triangle_count), self.rule.size)

    @cached_property
    def barycentric(self) -> np.ndarray:
        return np.tile(self.rule.points, (self.mesh.triangle_count, 1))

    @cached_property
    def weights(self) -> np.ndarray:
        return np.outer(self.mesh.signed_areas, self.rule.weights).reshape(-1)

    @cached_property
    def sampler(self) -> sparse.csr_matrix:
        """Sparse (Q, N) operator mapping nodal values to values at the quadrature points."""
        rows = np.repeat(np.arange(self.size), 3)
        cols = self.mesh.triangles[self.triangle_index].reshape(-1)
        return sparse.csr_matrix((self.barycentric.reshape(-1), (rows, cols)), shape=(self.size, self.mesh.node_count))

    @cached_property
    def positions(self) -> np.ndarray:
        return self.sampler @ self.mesh.nodes

    @property
    def size(self) -> int:
        return self.mesh.triangle_count * self.rule.size

    def sample(self, nodal: np.ndarray) -> np.ndarray:
        return self.sampler @ nodal

    def load_vector(self, values: np.ndarray) -> np.ndarray:
        """Nodal load <values, v_k> for every hat function v_k (values given at quadrature points)."""
        weighted = values * (self.weights if values.ndim == 1 else self.weights[:, None])
        return self.sampler.T @ weighted


def l2_inner_product(mesh: TriangleMesh, f: NodalField, g: NodalField, degree: int = 2) -> float:
    """Integral of f.g over the mesh with a rule exact for P1 x P1 integrands."""
    if f.mesh is not mesh or g.mesh is not mesh:
        if f.mesh.node_count != mesh.node_count or g.mesh.node_count != mesh.node_count:
            raise MeshError("fields do not live on the given mesh")
    if f.components != g.components:
        raise MeshError(f"component mismatch: {f.components} vs {g.components}")
    quadrature = MeshQuadrature(mesh, quadrature_rule(degree))
    fq = quadrature.sample(f.values)
    gq = quadrature.sample(g.values)
    product = fq * gq if f.components == 1 else np.sum(fq * gq, axis=1)
    return float(np.dot(quadrature.weights, product))
