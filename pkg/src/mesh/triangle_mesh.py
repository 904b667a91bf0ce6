from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from loguru import logger

from src.errors import MeshError

NORMAL_TOLERANCE = 1e-9


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Half the cross product of the two edge vectors leaving the first vertex, per triangle."""
    p0 = nodes[triangles[:, 0]]
    e1 = nodes[triangles[:, 1]] - p0
    e2 = nodes[triangles[:, 2]] - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def orient_triangles(nodes: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, int]:
    """Flip clockwise triangles to counterclockwise; returns the repaired array and the flip count."""
    triangles = np.array(triangles, dtype=np.int64, copy=True)
    flipped = signed_areas(nodes, triangles) < 0.0
    triangles[flipped] = triangles[flipped][:, [0, 2, 1]]
    return triangles, int(flipped.sum())


def edge_normals(nodes: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    delta = nodes[edges[:, 1]] - nodes[edges[:, 0]]
    lengths = np.hypot(delta[:, 0], delta[:, 1])
    safe = np.where(lengths > 0.0, lengths, 1.0)
    # interior lies to the left of each boundary edge, so the outward normal is the right-hand one
    normals = np.column_stack([delta[:, 1], -delta[:, 0]]) / safe[:, None]
    return normals, lengths


def detect_facets(nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    normals, _ = edge_normals(nodes, edges)
    outgoing: dict[int, int] = {}
    for index, start in enumerate(edges[:, 0]):
        if int(start) in outgoing:
            raise MeshError(f"boundary node {int(start)} has two outgoing boundary edges")
        outgoing[int(start)] = index

    def same(a: int, b: int) -> bool:
        return bool(np.linalg.norm(normals[a] - normals[b]) <= NORMAL_TOLERANCE)

    facet_ids = np.full(len(edges), -1, dtype=np.int64)
    next_id = 0
    for start in range(len(edges)):
        if facet_ids[start] >= 0:
            continue
        loop = [start]
        current = outgoing[int(edges[start, 1])]
        while current != start:
            loop.append(current)
            current = outgoing[int(edges[current, 1])]

        changes = [i for i in range(len(loop)) if not same(loop[i], loop[i - 1])]
        if changes:
            pivot = changes[0]
            loop = loop[pivot:] + loop[:pivot]
        for position, edge in enumerate(loop):
            if position > 0 and not same(edge, loop[position - 1]):
                next_id += 1
            facet_ids[edge] = next_id
        next_id += 1
    return facet_ids


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Planar P1 triangulation with counterclockwise triangles and oriented boundary edges.

    Boundary edges are stored with the interior on their left, so the outward
    normal of edge (a, b) is the right-hand normal of b - a.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    facet_ids: np.ndarray
    name: str = "mesh"

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError(f"nodes must have shape (N, 2), got {nodes.shape}")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError(f"triangles must have shape (T, 3), got {triangles.shape}")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(nodes)):
            raise MeshError("triangle references a node index out of range")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "facet_ids", np.ascontiguousarray(self.facet_ids, dtype=np.int64).reshape(-1))

    @classmethod
    def from_arrays(
        cls,
        nodes: np.ndarray,
        triangles: np.ndarray,
        facet_ids: np.ndarray | None = None,
        name: str = "mesh",
    ) -> TriangleMesh:
        """Build a mesh from raw arrays; triangles must already be counterclockwise.

        Boundary edges are derived from the connectivity. Without explicit facet
        ids, consecutive boundary edges sharing an outward normal form one facet.
        """
        nodes = np.asarray(nodes, dtype=np.float64)
        triangles = np.asarray(triangles, dtype=np.int64)
        if len(triangles) and np.any(signed_areas(nodes, triangles) <= 0.0):
            raise MeshError("triangles must be counterclockwise with positive area")
        edges, _, _ = edge_topology(triangles, len(nodes))
        if facet_ids is None:
            facet_ids = detect_facets(nodes, edges) if len(edges) else np.zeros(0, dtype=np.int64)
        elif len(facet_ids) != len(edges):
            raise MeshError(f"expected {len(edges)} facet ids, got {len(facet_ids)}")
        return cls(nodes=nodes, triangles=triangles, boundary_edges=edges, facet_ids=facet_ids, name=name)

    def with_nodes(self, nodes: np.ndarray, name: str | None = None) -> TriangleMesh:
        """Same topology and facet labelling, new coordinates (deformed configurations)."""
        return TriangleMesh(
            nodes=nodes,
            triangles=self.triangles,
            boundary_edges=self.boundary_edges,
            facet_ids=self.facet_ids,
            name=name or self.name,
        )

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @cached_property
    def neighbors(self) -> np.ndarray:
        """neighbors[t, k] is the triangle across the edge opposite local vertex k, or -1."""
        _, neighbors, _ = edge_topology(self.triangles, self.node_count)
        return neighbors

    @cached_property
    def boundary_edge_triangles(self) -> np.ndarray:
        _, _, owners = edge_topology(self.triangles, self.node_count)
        return owners

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges.reshape(-1))

    @cached_property
    def facet_normals(self) -> np.ndarray:
        normals, _ = edge_normals(self.nodes, self.boundary_edges)
        return normals

    @cached_property
    def boundary_edge_lengths(self) -> np.ndarray:
        _, lengths = edge_normals(self.nodes, self.boundary_edges)
        return lengths

    @cached_property
    def diameter(self) -> float:
        span = self.nodes.max(axis=0) - self.nodes.min(axis=0)
        return float(np.hypot(span[0], span[1]))

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 hat functions per triangle, shape (T, 3, 2)."""
        p = self.nodes[self.triangles]
        twice_area = 2.0 * self.signed_areas
        y = p[:, :, 1]
        x = p[:, :, 0]
        gx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]]) / twice_area[:, None]
        gy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]]) / twice_area[:, None]
        return np.stack([gx, gy], axis=-1)

    def field_gradients(self, values: np.ndarray) -> np.ndarray:
        """Piecewise-constant gradient of a scalar P1 field, shape (T, 2)."""
        return np.einsum("tk,tkd->td", np.asarray(values)[self.triangles], self.basis_gradients)

    def facets_are_straight(self) -> bool:
        """True when every facet has a single outward normal (a polygonal boundary)."""
        normals = self.facet_normals
        for facet in np.unique(self.facet_ids):
            block = normals[self.facet_ids == facet]
            if np.max(np.linalg.norm(block - block[0], axis=1)) > 1e-8:
                return False
        return True


def edge_topology(triangles: np.ndarray, node_count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boundary edges (oriented), triangle adjacency, and the owning triangle of each boundary edge."""
    count = len(triangles)
    local_start = np.array([1, 2, 0])
    local_end = np.array([2, 0, 1])
    starts = triangles[:, local_start].reshape(-1)
    ends = triangles[:, local_end].reshape(-1)
    keys = np.minimum(starts, ends) * np.int64(node_count) + np.maximum(starts, ends)

    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    _, first, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: an edge is shared by more than two triangles")

    neighbors = np.full(count * 3, -1, dtype=np.int64)
    shared = first[counts == 2]
    a = order[shared]
    b = order[shared + 1]
    neighbors[a] = b // 3
    neighbors[b] = a // 3

    single = order[first[counts == 1]]
    single.sort()
    edges = np.column_stack([starts[single], ends[single]])
    return edges, neighbors.reshape(count, 3), single // 3


def rectangle_mesh(x0: float, x1: float, y0: float, y1: float, nx: int, ny: int, name: str = "rectangle") -> TriangleMesh:
    """Structured triangulation of [x0, x1] x [y0, y1] with nx by ny cells.

    Cell diagonals alternate in a checkerboard so the mesh is symmetric about
    both mid-lines. Facet ids: 0 bottom, 1 right, 2 top, 3 left.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    grid_x, grid_y = np.meshgrid(xs, ys)
    nodes = np.column_stack([grid_x.reshape(-1), grid_y.reshape(-1)])

    def node(i: int, j: int) -> int:
        return j * (nx + 1) + i

    triangles = []
    for j in range(ny):
        for i in range(nx):
            sw, se, ne, nw = node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)
            if (i + j) % 2 == 0:
                triangles.extend([(sw, se, ne), (sw, ne, nw)])
            else:
                triangles.extend([(sw, se, nw), (se, ne, nw)])
    triangles = np.asarray(triangles, dtype=np.int64)

    edges, _, _ = edge_topology(triangles, len(nodes))
    normals, _ = edge_normals(nodes, edges)
    facet_ids = np.select(
        [normals[:, 1] < -0.5, normals[:, 0] > 0.5, normals[:, 1] > 0.5],
        [0, 1, 2],
        default=3,
    )
    return TriangleMesh(nodes=nodes, triangles=triangles, boundary_edges=edges, facet_ids=facet_ids, name=name)


def signed_area(mesh: TriangleMesh, tri_index: int) -> float:
    if not 0 <= tri_index < mesh.triangle_count:
        raise IndexError(f"triangle index {tri_index} out of range for {mesh.triangle_count} triangles")
    return float(signed_areas(mesh.nodes, mesh.triangles[tri_index : tri_index + 1])[0])


@dataclass(frozen=True, eq=False)
class NodalField:
    """Scalar (N,) or two-component (N, 2) nodal values with P1 interpolation semantics."""

    mesh: TriangleMesh
    values: np.ndarray
    name: str = "field"

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim == 2 and values.shape[1] == 1:
            values = values[:, 0]
        if values.ndim == 1:
            expected = (self.mesh.node_count,)
        elif values.ndim == 2 and values.shape[1] == 2:
            expected = (self.mesh.node_count, 2)
        else:
            raise ValueError(f"field values must have shape (N,) or (N, 2), got {values.shape}")
        if values.shape != expected:
            raise ValueError(f"field has {values.shape[0]} rows but mesh has {self.mesh.node_count} nodes")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"field {self.name!r} contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def components(self) -> int:
        return 1 if self.values.ndim == 1 else 2


@dataclass(frozen=True, eq=False)
class MorphingState:
    """phi = Id + displacement on the reference mesh, with the target used for boundary correspondence."""

    reference: TriangleMesh
    displacement: np.ndarray
    target: TriangleMesh | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        displacement = np.ascontiguousarray(self.displacement, dtype=np.float64)
        if displacement.shape != (self.reference.node_count, 2):
            raise ValueError(
                f"displacement must have shape ({self.reference.node_count}, 2), got {displacement.shape}"
            )
        object.__setattr__(self, "displacement", displacement)
        if self.target is None:
            object.__setattr__(self, "target", self.reference)

    @classmethod
    def identity(cls, reference: TriangleMesh, target: TriangleMesh | None = None) -> MorphingState:
        return cls(reference=reference, displacement=np.zeros((reference.node_count, 2)), target=target)

    @property
    def deformed_nodes(self) -> np.ndarray:
        return self.reference.nodes + self.displacement

    @property
    def deformed_areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._cache["areas"] = signed_areas(self.deformed_nodes, self.reference.triangles)
        return self._cache["areas"]

    @property
    def is_bijective(self) -> bool:
        return bool(np.all(self.deformed_areas > 0.0))

    def deformed_mesh(self) -> TriangleMesh:
        return self.reference.with_nodes(self.deformed_nodes, name=f"{self.reference.name}:deformed")


def detect_inverted(state: MorphingState) -> list[int]:
    inverted = np.flatnonzero(state.deformed_areas <= 0.0)
    if len(inverted):
        logger.debug("{} inverted triangle(s) in morphing of {}", len(inverted), state.reference.name)
    return inverted.tolist()
