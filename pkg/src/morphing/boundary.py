from __future__ import annotations

import numpy as np
from loguru import logger

from src.mesh.triangle_mesh import TriangleMesh


def _closest_on_edges(points: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    vectors = ends - starts
    length_sq = np.maximum(np.einsum("ed,ed->e", vectors, vectors), 1e-300)
    relative = points[:, None, :] - starts[None, :, :]
    t = np.clip(np.einsum("ped,ed->pe", relative, vectors) / length_sq, 0.0, 1.0)
    closest = starts[None, :, :] + t[..., None] * vectors[None, :, :]
    distance = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    return closest[np.arange(len(points)), np.argmin(distance, axis=1)]


class BoundaryCorrespondence:
    """Keeps each reference boundary node on the target boundary facet with the same id.

    Facets only correspond when the target shares the reference boundary
    topology and labelling; otherwise the whole target polyline is used.
    """

    def __init__(self, reference: TriangleMesh, target: TriangleMesh):
        self.reference = reference
        self.target = target
        self.nodes = reference.boundary_nodes
        node_facet = np.full(reference.node_count, -1, dtype=np.int64)
        # corner nodes take the facet of their outgoing edge
        node_facet[reference.boundary_edges[:, 0]] = reference.facet_ids
        self.node_facets = node_facet[self.nodes]
        self.by_facet = np.array_equal(reference.boundary_edges, target.boundary_edges) and np.array_equal(
            reference.facet_ids, target.facet_ids
        )

    def project(self, positions: np.ndarray) -> np.ndarray:
        """Nearest target-boundary point of each boundary node position, shape (B, 2)."""
        positions = np.atleast_2d(positions)
        edges = self.target.boundary_edges
        starts = self.target.nodes[edges[:, 0]]
        ends = self.target.nodes[edges[:, 1]]
        if not self.by_facet:
            return _closest_on_edges(positions, starts, ends)
        projected = np.empty_like(positions)
        for facet in np.unique(self.node_facets):
            rows = np.flatnonzero(self.node_facets == facet)
            chosen = np.flatnonzero(self.target.facet_ids == facet)
            projected[rows] = _closest_on_edges(positions[rows], starts[chosen], ends[chosen])
        return projected

    def drift(self, displacement: np.ndarray) -> np.ndarray:
        positions = self.reference.nodes[self.nodes] + displacement[self.nodes]
        return np.linalg.norm(positions - self.project(positions), axis=1)

    def max_drift(self, displacement: np.ndarray) -> float:
        return float(np.max(self.drift(displacement), initial=0.0))

    def correct(self, displacement: np.ndarray, tolerance: float) -> tuple[np.ndarray, int]:
        """Project boundary nodes that drifted farther than ``tolerance`` back onto the target boundary."""
        positions = self.reference.nodes[self.nodes] + displacement[self.nodes]
        projected = self.project(positions)
        drift = np.linalg.norm(positions - projected, axis=1)
        moved = drift > tolerance
        if not moved.any():
            return displacement, 0
        corrected = displacement.copy()
        rows = self.nodes[moved]
        corrected[rows] = projected[moved] - self.reference.nodes[rows]
        logger.warning(
            "Safeguard projection moved {} boundary node(s) of {} (max drift {:.3e})",
            int(moved.sum()),
            self.target.name,
            float(drift.max()),
        )
        return corrected, int(moved.sum())
