from __future__ import annotations

from pathlib import Path
from typing import Iterator, TextIO

import numpy as np
from loguru import logger

from src.errors import MeshFormatError
from src.mesh.triangle_mesh import NodalField, TriangleMesh, detect_facets, edge_topology, orient_triangles

MESH_HEADER = "MORPHMESH v1"
FIELD_HEADER = "MORPHFIELD v1"
FLOAT_FORMAT = "%.17g"
VTK_TRIANGLE = 5


class LineReader:
    """Iterates non-empty lines of a text file while tracking 1-based line numbers for error messages."""

    def __init__(self, path: Path, handle: TextIO, comments: bool = True):
        self.path = path
        self._lines: Iterator[tuple[int, str]] = ((number, line.strip()) for number, line in enumerate(handle, start=1))
        self.line = 0
        self._comments = comments

    def error(self, message: str) -> MeshFormatError:
        return MeshFormatError(str(self.path), self.line, message)

    def next(self, what: str) -> str:
        for number, line in self._lines:
            self.line = number
            if line and not (self._comments and line.startswith("#")):
                return line
        self.line += 1
        raise self.error(f"unexpected end of file while reading {what}")

    def keyword(self, keyword: str) -> list[str]:
        tokens = self.next(keyword).split()
        if tokens[0] != keyword:
            raise self.error(f"expected '{keyword}', found '{tokens[0]}'")
        return tokens[1:]

    def count(self, keyword: str) -> int:
        tokens = self.keyword(keyword)
        try:
            return int(tokens[0])
        except (IndexError, ValueError) as exc:
            raise self.error(f"'{keyword}' needs a non-negative integer count") from exc

    def rows(self, count: int, width: int, dtype: type, what: str) -> np.ndarray:
        out = np.empty((count, width), dtype=dtype)
        for row in range(count):
            tokens = self.next(what).split()
            if len(tokens) != width:
                raise self.error(f"{what} line needs {width} values, found {len(tokens)}")
            try:
                out[row] = [dtype(token) for token in tokens]
            except ValueError as exc:
                raise self.error(f"cannot parse {what} value: {exc}") from exc
        return out

    def values(self, count: int, dtype: type, what: str) -> np.ndarray:
        """Whitespace-separated values spread over any number of lines."""
        out: list = []
        while len(out) < count:
            try:
                out.extend(dtype(token) for token in self.next(what).split())
            except ValueError as exc:
                raise self.error(f"cannot parse {what} value: {exc}") from exc
        if len(out) != count:
            raise self.error(f"expected {count} {what} values, found {len(out)}")
        return np.asarray(out, dtype=dtype)


def _rebuild_mesh(
    reader: LineReader,
    nodes: np.ndarray,
    triangles: np.ndarray,
    stored_edges: np.ndarray | None,
    stored_facets: np.ndarray | None,
    name: str,
) -> tuple[TriangleMesh, int]:
    if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(nodes)):
        raise reader.error("triangle references a node index out of range")
    triangles, flips = orient_triangles(nodes, triangles)
    if flips:
        logger.warning("{}: repaired orientation of {} clockwise triangle(s)", reader.path, flips)
    edges, _, _ = edge_topology(triangles, len(nodes))
    if stored_edges is None:
        facet_ids = detect_facets(nodes, edges) if len(edges) else np.zeros(0, dtype=np.int64)
    else:
        if len(stored_edges) != len(edges):
            raise reader.error(f"file lists {len(stored_edges)} boundary edges, connectivity implies {len(edges)}")
        # stored orientation may predate the repair, so match edges by their unordered node pair
        key = {(min(a, b), max(a, b)): facet for (a, b), facet in zip(stored_edges.tolist(), stored_facets.tolist())}
        try:
            facet_ids = np.array([key[(min(a, b), max(a, b))] for a, b in edges.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise reader.error(f"boundary edge {exc.args[0]} is not an edge of exactly one triangle") from exc
    mesh = TriangleMesh(nodes=nodes, triangles=triangles, boundary_edges=edges, facet_ids=facet_ids, name=name)
    return mesh, flips


def load_mesh(path: str | Path) -> tuple[TriangleMesh, int]:
    """Read a native or legacy-VTK mesh; returns the mesh and the number of orientation repairs."""
    path = Path(path)
    if path.suffix.lower() == ".vtk":
        mesh, _, flips = _read_vtk(path)
        return mesh, flips
    with path.open("r", encoding="utf-8") as handle:
        reader = LineReader(path, handle)
        header = reader.next("header")
        if header != MESH_HEADER:
            raise reader.error(f"expected header '{MESH_HEADER}', found '{header}'")
        name_tokens = reader.keyword("name")
        name = " ".join(name_tokens) or path.stem
        nodes = reader.rows(reader.count("nodes"), 2, float, "node")
        triangles = reader.rows(reader.count("triangles"), 3, int, "triangle")
        boundary = reader.rows(reader.count("boundary_edges"), 3, int, "boundary edge")
        return _rebuild_mesh(reader, nodes, triangles, boundary[:, :2], boundary[:, 2], name)


def read_mesh(path: str | Path) -> TriangleMesh:
    mesh, _ = load_mesh(path)
    return mesh


def write_mesh(path: str | Path, mesh: TriangleMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".vtk":
        write_vtk(path, mesh, {})
        return
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"{MESH_HEADER}\nname {mesh.name}\nnodes {mesh.node_count}\n")
        np.savetxt(handle, mesh.nodes, fmt=FLOAT_FORMAT)
        handle.write(f"triangles {mesh.triangle_count}\n")
        np.savetxt(handle, mesh.triangles, fmt="%d")
        handle.write(f"boundary_edges {len(mesh.boundary_edges)}\n")
        np.savetxt(handle, np.column_stack([mesh.boundary_edges, mesh.facet_ids]), fmt="%d")


def read_field(path: str | Path, mesh: TriangleMesh) -> NodalField:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        reader = LineReader(path, handle)
        header = reader.next("header")
        if header != FIELD_HEADER:
            raise reader.error(f"expected header '{FIELD_HEADER}', found '{header}'")
        name = " ".join(reader.keyword("name")) or path.stem
        tokens = reader.keyword("nodes")
        try:
            count, components = int(tokens[0]), int(tokens[2])
        except (IndexError, ValueError) as exc:
            raise reader.error("expected 'nodes <N> components <C>'") from exc
        if count != mesh.node_count:
            raise reader.error(f"field has {count} nodes, mesh {mesh.name!r} has {mesh.node_count}")
        if components not in (1, 2):
            raise reader.error(f"components must be 1 or 2, got {components}")
        values = reader.rows(count, components, float, "field")
    return NodalField(mesh=mesh, values=values[:, 0] if components == 1 else values, name=name)


def write_field(path: str | Path, field: NodalField) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"{FIELD_HEADER}\nname {field.name}\nnodes {field.mesh.node_count} components {field.components}\n")
        np.savetxt(handle, field.values.reshape(field.mesh.node_count, -1), fmt=FLOAT_FORMAT)


def write_vtk(path: str | Path, mesh: TriangleMesh, fields: dict[str, NodalField]) -> None:
    """Legacy-VTK ASCII unstructured grid with scalar and vector point data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(f"# vtk DataFile Version 3.0\n{mesh.name}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        handle.write(f"POINTS {mesh.node_count} double\n")
        np.savetxt(handle, np.column_stack([mesh.nodes, np.zeros(mesh.node_count)]), fmt=FLOAT_FORMAT)
        handle.write(f"CELLS {mesh.triangle_count} {4 * mesh.triangle_count}\n")
        np.savetxt(handle, np.column_stack([np.full(mesh.triangle_count, 3), mesh.triangles]), fmt="%d")
        handle.write(f"CELL_TYPES {mesh.triangle_count}\n")
        np.savetxt(handle, np.full(mesh.triangle_count, VTK_TRIANGLE), fmt="%d")
        if not fields:
            return
        handle.write(f"POINT_DATA {mesh.node_count}\n")
        for name, field in fields.items():
            label = name.replace(" ", "_")
            if field.components == 1:
                handle.write(f"SCALARS {label} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(handle, field.values, fmt=FLOAT_FORMAT)
            else:
                handle.write(f"VECTORS {label} double\n")
                np.savetxt(handle, np.column_stack([field.values, np.zeros(mesh.node_count)]), fmt=FLOAT_FORMAT)


def read_vtk(path: str | Path) -> tuple[TriangleMesh, dict[str, NodalField]]:
    mesh, fields, _ = _read_vtk(Path(path))
    return mesh, fields


def _read_vtk(path: Path) -> tuple[TriangleMesh, dict[str, NodalField], int]:
    with path.open("r", encoding="utf-8") as handle:
        reader = LineReader(path, handle, comments=False)
        first = reader.next("VTK header")
        if not first.startswith("# vtk DataFile"):
            raise reader.error("missing '# vtk DataFile' header")
        title = reader.next("title")
        if reader.next("format") != "ASCII":
            raise reader.error("only ASCII legacy VTK files are supported")
        if reader.next("dataset") != "DATASET UNSTRUCTURED_GRID":
            raise reader.error("only DATASET UNSTRUCTURED_GRID is supported")

        points = reader.values(3 * reader.count("POINTS"), float, "point").reshape(-1, 3)
        cell_tokens = reader.keyword("CELLS")
        cell_count, cell_size = int(cell_tokens[0]), int(cell_tokens[1])
        cells = reader.values(cell_size, int, "cell").tolist()
        cell_types = reader.values(reader.count("CELL_TYPES"), int, "cell type")
        if len(cell_types) != cell_count:
            raise reader.error("CELL_TYPES count does not match CELLS")

        triangles = []
        cursor = 0
        skipped = 0
        for kind in cell_types:
            width = cells[cursor]
            if kind == VTK_TRIANGLE and width == 3:
                triangles.append(cells[cursor + 1 : cursor + 4])
            else:
                skipped += 1
            cursor += width + 1
        if skipped:
            logger.warning("{}: ignored {} non-triangle cell(s)", path, skipped)
        mesh, flips = _rebuild_mesh(reader, points[:, :2], np.asarray(triangles, dtype=np.int64).reshape(-1, 3), None, None, title)

        fields: dict[str, NodalField] = {}
        node_count = len(points)
        try:
            section = reader.next("POINT_DATA")
        except MeshFormatError:
            return mesh, fields, flips
        if section.split()[0] != "POINT_DATA":
            return mesh, fields, flips
        while True:
            try:
                tokens = reader.next("data array").split()
            except MeshFormatError:
                break
            if tokens[0] == "SCALARS":
                components = int(tokens[3]) if len(tokens) > 3 else 1
                reader.keyword("LOOKUP_TABLE")
                values = reader.values(node_count * components, float, tokens[1]).reshape(node_count, components)
                fields[tokens[1]] = NodalField(mesh=mesh, values=values[:, 0] if components == 1 else values[:, :2], name=tokens[1])
            elif tokens[0] == "VECTORS":
                values = reader.values(node_count * 3, float, tokens[1]).reshape(node_count, 3)
                fields[tokens[1]] = NodalField(mesh=mesh, values=values[:, :2], name=tokens[1])
            else:
                raise reader.error(f"unsupported point data section '{tokens[0]}'")
    return mesh, fields, flips
