from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.spatial import cKDTree

from src.errors import MeshError
from src.mesh.triangle_mesh import NodalField, TriangleMesh

INSIDE_TOLERANCE = 1e-12
BRUTE_FORCE_CHUNK = 256


@dataclass(frozen=True)
class Location:
    """Containing triangle and barycentric coordinates for a batch of query points."""

    triangles: np.ndarray
    barycentric: np.ndarray
    clamped: np.ndarray

    def interpolate(self, mesh: TriangleMesh, values: np.ndarray) -> np.ndarray:
        corner_values = np.asarray(values)[mesh.triangles[self.triangles]]
        if corner_values.ndim == 2:
            return np.einsum("pk,pk->p", self.barycentric, corner_values)
        return np.einsum("pk,pkc->pc", self.barycentric, corner_values)


class PointLocator:
    """Visibility-walk point location seeded from a uniform grid over the mesh bounding box.

    Points the walk cannot place (walk leaves through the boundary or exceeds
    its step budget) fall back to an exhaustive scan; points outside every
    triangle are clamped to the nearest boundary point. The locator is
    read-only after construction and can be shared between threads.
    """

    def __init__(self, mesh: TriangleMesh, cells_per_triangle: float = 1.0):
        if mesh.triangle_count == 0:
            raise MeshError("cannot locate points in an empty mesh")
        self.mesh = mesh
        corners = mesh.nodes[mesh.triangles]
        self._origin = corners[:, 0, :]
        jacobian = np.stack([corners[:, 1, :] - self._origin, corners[:, 2, :] - self._origin], axis=-1)
        determinant = jacobian[:, 0, 0] * jacobian[:, 1, 1] - jacobian[:, 0, 1] * jacobian[:, 1, 0]
        safe = np.where(np.abs(determinant) > 0.0, determinant, 1.0)
        self._inverse = np.empty_like(jacobian)
        self._inverse[:, 0, 0] = jacobian[:, 1, 1] / safe
        self._inverse[:, 0, 1] = -jacobian[:, 0, 1] / safe
        self._inverse[:, 1, 0] = -jacobian[:, 1, 0] / safe
        self._inverse[:, 1, 1] = jacobian[:, 0, 0] / safe
        self._degenerate = np.abs(determinant) <= 0.0
        self._neighbors = mesh.neighbors

        self._lower = mesh.nodes.min(axis=0)
        span = np.maximum(mesh.nodes.max(axis=0) - self._lower, 1e-300)
        cells = max(1.0, cells_per_triangle * mesh.triangle_count)
        aspect = span[0] / span[1]
        nx = max(1, int(round(np.sqrt(cells * aspect))))
        ny = max(1, int(round(cells / nx)))
        self._shape = np.array([nx, ny])
        self._cell_size = span / self._shape
        centers_x = self._lower[0] + (np.arange(nx) + 0.5) * self._cell_size[0]
        centers_y = self._lower[1] + (np.arange(ny) + 0.5) * self._cell_size[1]
        grid_x, grid_y = np.meshgrid(centers_x, centers_y, indexing="ij")
        centroids = corners.mean(axis=1)
        _, seeds = cKDTree(centroids).query(np.column_stack([grid_x.reshape(-1), grid_y.reshape(-1)]))
        self._seeds = np.asarray(seeds, dtype=np.int64).reshape(nx, ny)
        self._max_steps = int(4 * np.sqrt(mesh.triangle_count)) + 50

        edges = mesh.boundary_edges
        self._edge_start = mesh.nodes[edges[:, 0]]
        self._edge_vector = mesh.nodes[edges[:, 1]] - self._edge_start
        self._edge_length_sq = np.maximum(np.einsum("ed,ed->e", self._edge_vector, self._edge_vector), 1e-300)

    def barycentric(self, triangles: np.ndarray, points: np.ndarray) -> np.ndarray:
        local = np.einsum("pij,pj->pi", self._inverse[triangles], points - self._origin[triangles])
        return np.column_stack([1.0 - local[:, 0] - local[:, 1], local[:, 0], local[:, 1]])

    def seed(self, points: np.ndarray) -> np.ndarray:
        cell = np.floor((points - self._lower) / self._cell_size).astype(np.int64)
        cell = np.clip(cell, 0, self._shape - 1)
        return self._seeds[cell[:, 0], cell[:, 1]]

    def locate(self, points: np.ndarray, hint: np.ndarray | None = None) -> Location:
        """Locate a batch of points; ``hint`` gives starting triangles (for example the previous locations)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        count = len(points)
        if hint is not None and len(hint) == count:
            current = np.array(hint, dtype=np.int64, copy=True)
        else:
            current = self.seed(points)
        found = np.zeros(count, dtype=bool)
        stuck = np.zeros(count, dtype=bool)
        coordinates = np.zeros((count, 3))

        active = np.arange(count)
        for _ in range(self._max_steps):
            if len(active) == 0:
                break
            bary = self.barycentric(current[active], points[active])
            weakest = np.argmin(bary, axis=1)
            inside = bary[np.arange(len(active)), weakest] >= -INSIDE_TOLERANCE
            inside &= ~self._degenerate[current[active]]

            done = active[inside]
            found[done] = True
            coordinates[done] = bary[inside]

            moving = active[~inside]
            step_to = self._neighbors[current[moving], weakest[~inside]]
            left_mesh = step_to < 0
            stuck[moving[left_mesh]] = True
            current[moving[~left_mesh]] = step_to[~left_mesh]
            active = moving[~left_mesh]
        stuck[active] = True

        clamped = np.zeros(count, dtype=bool)
        pending = np.flatnonzero(stuck)
        if len(pending):
            triangles, bary, outside = self._scan(points[pending])
            current[pending] = triangles
            coordinates[pending] = bary
            clamped[pending] = outside
            if outside.any():
                logger.debug("{} point(s) outside {} clamped to the boundary", int(outside.sum()), self.mesh.name)
        return Location(triangles=current, barycentric=coordinates, clamped=clamped)

    def locate_bruteforce(self, points: np.ndarray) -> Location:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        triangles, bary, outside = self._scan(points)
        return Location(triangles=triangles, barycentric=bary, clamped=outside)

    def _scan(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        count = len(points)
        triangles = np.full(count, -1, dtype=np.int64)
        coordinates = np.zeros((count, 3))
        valid = ~self._degenerate
        for start in range(0, count, BRUTE_FORCE_CHUNK):
            chunk = points[start : start + BRUTE_FORCE_CHUNK]
            offset = chunk[:, None, :] - self._origin[None, :, :]
            local = np.einsum("tij,ptj->pti", self._inverse, offset)
            bary = np.stack([1.0 - local[..., 0] - local[..., 1], local[..., 0], local[..., 1]], axis=-1)
            margin = np.where(valid[None, :], bary.min(axis=-1), -np.inf)
            best = np.argmax(margin, axis=1)
            hit = margin[np.arange(len(chunk)), best] >= -INSIDE_TOLERANCE
            rows = np.arange(start, start + len(chunk))
            triangles[rows[hit]] = best[hit]
            coordinates[rows[hit]] = bary[np.flatnonzero(hit), best[hit]]

        outside = triangles < 0
        if outside.any():
            projected, edge = self.project_to_boundary(points[outside])
            owners = self.mesh.boundary_edge_triangles[edge]
            bary = self.barycentric(owners, projected)
            bary = np.clip(bary, 0.0, None)
            bary /= bary.sum(axis=1, keepdims=True)
            triangles[outside] = owners
            coordinates[outside] = bary
        return triangles, coordinates, outside

    def project_to_boundary(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point on the boundary polyline and the index of the boundary edge carrying it."""
        points = np.atleast_2d(points)
        projected = np.empty_like(points)
        edges = np.empty(len(points), dtype=np.int64)
        for start in range(0, len(points), BRUTE_FORCE_CHUNK):
            chunk = points[start : start + BRUTE_FORCE_CHUNK]
            relative = chunk[:, None, :] - self._edge_start[None, :, :]
            t = np.clip(np.einsum("ped,ed->pe", relative, self._edge_vector) / self._edge_length_sq, 0.0, 1.0)
            closest = self._edge_start[None, :, :] + t[..., None] * self._edge_vector[None, :, :]
            distance = np.linalg.norm(chunk[:, None, :] - closest, axis=-1)
            best = np.argmin(distance, axis=1)
            rows = np.arange(len(chunk))
            projected[start : start + len(chunk)] = closest[rows, best]
            edges[start : start + len(chunk)] = best
        return projected, edges

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        projected, _ = self.project_to_boundary(points)
        return np.linalg.norm(np.atleast_2d(points) - projected, axis=1)


def interpolate_at(mesh: TriangleMesh, field: NodalField, point: np.ndarray) -> np.ndarray:
    """P1 value of the field at one point, clamped to the boundary when the point lies outside."""
    if field.mesh.node_count != mesh.node_count:
        raise MeshError("field does not live on the given mesh")
    location = PointLocator(mesh).locate(np.asarray(point, dtype=np.float64).reshape(1, 2))
    return np.atleast_1d(location.interpolate(mesh, field.values)[0])
