from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from loguru import logger
from scipy.interpolate import RBFInterpolator

from src.errors import GeometricMorphingError, MeshError
from src.mesh.triangle_mesh import MorphingState, NodalField, TriangleMesh, detect_inverted

RBF_KERNEL = "thin_plate_spline"


@dataclass(frozen=True, eq=False)
class GeometricMorphing:
    """phi_geo = Id + displacement, mapping the reference mesh onto a target geometry."""

    reference: TriangleMesh
    target: TriangleMesh | None
    displacement: np.ndarray
    method: Literal["rbf", "identity"]

    @property
    def state(self) -> MorphingState:
        return MorphingState(reference=self.reference, displacement=self.displacement, target=self.target)

    def as_field(self) -> NodalField:
        name = f"phi_geo:{self.target.name}" if self.target is not None else "phi_geo"
        return NodalField(mesh=self.reference, values=self.displacement, name=name)


def rbf_geometric_morphing(
    reference: TriangleMesh, boundary_positions: np.ndarray, target: TriangleMesh | None = None
) -> GeometricMorphing:
    """Thin-plate-spline extension of prescribed boundary-node positions to the interior nodes.

    ``boundary_positions[k]`` is the target position of ``reference.boundary_nodes[k]``.
    The linear polynomial tail makes the extension reproduce affine maps.
    """
    boundary = reference.boundary_nodes
    boundary_positions = np.asarray(boundary_positions, dtype=np.float64)
    if boundary_positions.shape != (len(boundary), 2):
        raise ValueError(
            f"boundary correspondence has {len(boundary_positions)} point(s), reference has {len(boundary)} boundary node(s)"
        )
    source = reference.nodes[boundary]
    shift = boundary_positions - source
    if not np.any(shift):
        return GeometricMorphing(
            reference=reference, target=target, displacement=np.zeros((reference.node_count, 2)), method="identity"
        )

    interior = np.setdiff1d(np.arange(reference.node_count), boundary)
    displacement = np.zeros((reference.node_count, 2))
    displacement[boundary] = shift
    if len(interior):
        interpolator = RBFInterpolator(source, shift, kernel=RBF_KERNEL, degree=1)
        displacement[interior] = interpolator(reference.nodes[interior])

    morphing = GeometricMorphing(reference=reference, target=target, displacement=displacement, method="rbf")
    inverted = detect_inverted(morphing.state)
    if inverted:
        raise GeometricMorphingError(inverted)
    logger.debug(
        "RBF morphing of {} onto {}: max displacement {:.3e}",
        reference.name,
        target.name if target is not None else "boundary",
        float(np.max(np.linalg.norm(displacement, axis=1))),
    )
    return morphing


def geometric_morphing_to(reference: TriangleMesh, target: TriangleMesh) -> GeometricMorphing:
    """Geometric morphing onto a target mesh sharing the reference topology (node-index correspondence)."""
    if target is reference:
        return GeometricMorphing(
            reference=reference, target=target, displacement=np.zeros((reference.node_count, 2)), method="identity"
        )
    if target.node_count != reference.node_count or not np.array_equal(target.triangles, reference.triangles):
        raise MeshError(f"mesh {target.name!r} does not share the topology of reference {reference.name!r}")
    return rbf_geometric_morphing(reference, target.nodes[reference.boundary_nodes], target)
