from __future__ import annotations

import threading

import numpy as np
from loguru import logger
from scipy import sparse

from src.mesh.triangle_mesh import TriangleMesh, edge_normals
from src.schemas.run_config import ElasticParams

REGULARIZATION_SCALE = 1e-10

_P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def vector_dofs(triangles: np.ndarray) -> np.ndarray:
    """Interleaved degrees of freedom (2 * node + component) of each triangle, shape (T, 6)."""
    return (2 * np.repeat(triangles, 2, axis=1) + np.tile([0, 1], 3)).astype(np.int64)


def _scatter(dofs: np.ndarray, blocks: np.ndarray, size: int) -> sparse.csr_matrix:
    width = dofs.shape[1]
    rows = np.repeat(dofs, width, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, width)).reshape(-1)
    # COO duplicates are summed in element order, so the result does not depend on worker count
    return sparse.coo_matrix((blocks.reshape(-1), (rows, cols)), shape=(size, size)).tocsr()


def constitutive_matrix(params: ElasticParams) -> np.ndarray:
    """Plane-stress law in Voigt form with engineering shear strain."""
    e, nu = params.young_modulus, params.poisson_ratio
    shear = e / (1.0 + nu)
    lame = e * nu / ((1.0 + nu) * (1.0 - nu))
    return np.array([[shear + lame, lame, 0.0], [lame, shear + lame, 0.0], [0.0, 0.0, 0.5 * shear]])


def strain_operator(mesh: TriangleMesh) -> np.ndarray:
    gradients = mesh.basis_gradients
    b = np.zeros((mesh.triangle_count, 3, 6))
    b[:, 0, 0::2] = gradients[:, :, 0]
    b[:, 1, 1::2] = gradients[:, :, 1]
    b[:, 2, 0::2] = gradients[:, :, 1]
    b[:, 2, 1::2] = gradients[:, :, 0]
    return b


def assemble_bulk_elasticity(mesh: TriangleMesh, params: ElasticParams) -> sparse.csr_matrix:
    b = strain_operator(mesh)
    d = constitutive_matrix(params)
    blocks = mesh.signed_areas[:, None, None] * np.einsum("tki,kl,tlj->tij", b, d, b)
    return _scatter(vector_dofs(mesh.triangles), blocks, 2 * mesh.node_count)


def assemble_boundary_penalty(
    mesh: TriangleMesh, alpha: float, normals: np.ndarray, lengths: np.ndarray
) -> sparse.csr_matrix:
    """alpha * boundary integral of (u.n)(v.n), lumped at the two end nodes of every boundary edge."""
    size = 2 * mesh.node_count
    if alpha == 0.0 or len(mesh.boundary_edges) == 0:
        return sparse.csr_matrix((size, size))
    weight = 0.5 * alpha * lengths
    block = weight[:, None, None] * np.einsum("ei,ej->eij", normals, normals)
    rows, cols, values = [], [], []
    for end in (0, 1):
        node = mesh.boundary_edges[:, end]
        for i in range(2):
            for j in range(2):
                rows.append(2 * node + i)
                cols.append(2 * node + j)
                values.append(block[:, i, j])
    return sparse.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()


def deformed_boundary_geometry(mesh: TriangleMesh, displacement: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Outward normals and lengths of the boundary edges of the deformed configuration."""
    if displacement is None:
        return mesh.facet_normals, mesh.boundary_edge_lengths
    return edge_normals(mesh.nodes + displacement, mesh.boundary_edges)


def assemble_elasticity(
    mesh: TriangleMesh,
    params: ElasticParams,
    normals: np.ndarray | None = None,
    lengths: np.ndarray | None = None,
) -> sparse.csr_matrix:
    """Elasticity form with the boundary-normal penalty.

    ``normals`` and ``lengths`` are given per boundary edge of the reference mesh and
    describe the current deformed boundary; both default to the reference boundary.
    """
    if normals is None:
        normals = mesh.facet_normals
    if lengths is None:
        lengths = mesh.boundary_edge_lengths
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != (len(mesh.boundary_edges), 2):
        raise ValueError(f"expected one normal per boundary edge, got shape {normals.shape}")
    bulk = assemble_bulk_elasticity(mesh, params)
    return (bulk + assemble_boundary_penalty(mesh, params.penalty_alpha, normals, np.asarray(lengths))).tocsr()


def assemble_elasticity_fixed(mesh: TriangleMesh, params: ElasticParams, facet_invariant: bool = True) -> sparse.csr_matrix:
    if not facet_invariant:
        raise ValueError("the fixed elasticity operator requires every facet to map onto itself")
    if not mesh.facets_are_straight():
        raise ValueError(f"mesh {mesh.name!r} has curved facets; the fixed operator needs a polygonal boundary")
    return assemble_elasticity(mesh, params)


def assemble_mass(mesh: TriangleMesh, components: int = 1) -> sparse.csr_matrix:
    if components not in (1, 2):
        raise ValueError(f"components must be 1 or 2, got {components}")
    blocks = mesh.signed_areas[:, None, None] * _P1_MASS[None, :, :]
    scalar = _scatter(mesh.triangles, blocks, mesh.node_count)
    if components == 1:
        return scalar
    return sparse.kron(scalar, sparse.identity(2), format="csr")


def assemble_laplacian(mesh: TriangleMesh) -> sparse.csr_matrix:
    gradients = mesh.basis_gradients
    blocks = mesh.signed_areas[:, None, None] * np.einsum("tid,tjd->tij", gradients, gradients)
    return _scatter(mesh.triangles, blocks, mesh.node_count)


def regularization_weight(stiffness: sparse.spmatrix, mass: sparse.spmatrix) -> float:
    return REGULARIZATION_SCALE * float(stiffness.diagonal().sum()) / float(mass.diagonal().sum())


class ElasticityOperators:
    """Per-mesh cache of the Riesz operators used by the ascent.

    The bulk stiffness and the vector mass matrix are assembled once. The fixed
    operator (reference normals) is built on first use and reused; the general
    operator reassembles only the boundary penalty from the deformed boundary.
    ``assembly_count`` counts every assembly so reuse is observable in logs and tests.
    """

    def __init__(self, mesh: TriangleMesh, params: ElasticParams, facet_invariant: bool = True):
        self.mesh = mesh
        self.params = params
        self.facet_invariant = facet_invariant
        self.bulk = assemble_bulk_elasticity(mesh, params)
        self.mass = assemble_mass(mesh, components=2)
        self.epsilon = regularization_weight(self.bulk, self.mass)
        self.assembly_count = 1
        self._fixed: sparse.csr_matrix | None = None
        self._lock = threading.Lock()

    @property
    def dimension(self) -> int:
        return 2 * self.mesh.node_count

    def fixed(self) -> sparse.csr_matrix:
        with self._lock:
            if self._fixed is None:
                if not self.facet_invariant:
                    raise ValueError("the fixed elasticity operator requires every facet to map onto itself")
                penalty = assemble_boundary_penalty(
                    self.mesh, self.params.penalty_alpha, self.mesh.facet_normals, self.mesh.boundary_edge_lengths
                )
                self._fixed = (self.bulk + penalty + self.epsilon * self.mass).tocsr()
                self.assembly_count += 1
                logger.info("Assembled fixed elasticity operator for {} ({} dofs)", self.mesh.name, self.dimension)
            return self._fixed

    def general(self, displacement: np.ndarray) -> sparse.csr_matrix:
        normals, lengths = deformed_boundary_geometry(self.mesh, displacement)
        penalty = assemble_boundary_penalty(self.mesh, self.params.penalty_alpha, normals, lengths)
        with self._lock:
            self.assembly_count += 1
        return (self.bulk + penalty + self.epsilon * self.mass).tocsr()

    def operator(self, displacement: np.ndarray | None = None) -> sparse.csr_matrix:
        """Fixed operator in the facet-invariant case, otherwise the one for the given displacement."""
        if self.facet_invariant:
            return self.fixed()
        return self.general(np.zeros((self.mesh.node_count, 2)) if displacement is None else displacement)
