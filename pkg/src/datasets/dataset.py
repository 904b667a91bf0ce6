from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger

from src.errors import ConfigError, MeshError
from src.mesh.io import read_field, read_mesh, write_field, write_mesh
from src.mesh.triangle_mesh import NodalField, TriangleMesh

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True, eq=False)
class Sample:
    name: str
    mesh: TriangleMesh
    field: NodalField
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True, eq=False)
class SnapshotDataset:
    """Snapshots u_i on their own domains plus the reference mesh all morphings start from."""

    reference: TriangleMesh
    samples: list[Sample]
    parameter_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("a dataset needs at least one sample")
        for sample in self.samples:
            if sample.field.components != 1:
                raise MeshError(f"sample {sample.name!r}: snapshots must be scalar fields")
        widths = {len(sample.mu) for sample in self.samples}
        if len(widths) > 1:
            raise ValueError(f"samples disagree on the number of parameters: {sorted(widths)}")

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def parameters(self) -> np.ndarray:
        return np.stack([np.asarray(sample.mu, dtype=np.float64).reshape(-1) for sample in self.samples])

    def shares_reference(self) -> bool:
        """True when every sample domain is the reference domain itself (same nodes and connectivity)."""
        for sample in self.samples:
            mesh = sample.mesh
            if mesh is self.reference:
                continue
            if mesh.node_count != self.reference.node_count or mesh.triangle_count != self.reference.triangle_count:
                return False
            if not (np.array_equal(mesh.nodes, self.reference.nodes) and np.array_equal(mesh.triangles, self.reference.triangles)):
                return False
        return True

    def shares_topology(self) -> bool:
        return all(
            np.array_equal(sample.mesh.triangles, self.reference.triangles) and sample.mesh.node_count == self.reference.node_count
            for sample in self.samples
        )

    def subset(self, indices: list[int]) -> SnapshotDataset:
        return SnapshotDataset(
            reference=self.reference, samples=[self.samples[i] for i in indices], parameter_names=self.parameter_names
        )


def save_dataset(directory: str | Path, dataset: SnapshotDataset) -> Path:
    """Write meshes, fields and manifest.json; meshes shared between samples are written once."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mesh(directory / "reference.mesh", dataset.reference)
    mesh_paths: dict[int, str] = {id(dataset.reference): "reference.mesh"}
    entries = []
    for index, sample in enumerate(dataset.samples):
        if id(sample.mesh) not in mesh_paths:
            relative = f"meshes/{sample.name}.mesh"
            write_mesh(directory / relative, sample.mesh)
            mesh_paths[id(sample.mesh)] = relative
        field_path = f"fields/{sample.name}.field"
        write_field(directory / field_path, sample.field)
        entries.append(
            {
                "name": sample.name,
                "mesh": mesh_paths[id(sample.mesh)],
                "field": field_path,
                "mu": [float(value) for value in np.asarray(sample.mu).reshape(-1)],
            }
        )
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "reference": "reference.mesh",
        "parameters": list(dataset.parameter_names),
        "samples": entries,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("Wrote dataset with {} sample(s) to {}", dataset.size, directory)
    return path


def load_dataset(directory: str | Path) -> SnapshotDataset:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {manifest.get('schema_version')!r}")

    meshes: dict[str, TriangleMesh] = {}

    def mesh_at(relative: str) -> TriangleMesh:
        if relative not in meshes:
            meshes[relative] = read_mesh(directory / relative)
        return meshes[relative]

    reference = mesh_at(manifest.get("reference", "reference.mesh"))
    samples = []
    for entry in manifest["samples"]:
        mesh = mesh_at(entry["mesh"])
        samples.append(
            Sample(
                name=entry["name"],
                mesh=mesh,
                field=read_field(directory / entry["field"], mesh),
                mu=np.asarray(entry.get("mu", []), dtype=np.float64),
            )
        )
    return SnapshotDataset(reference=reference, samples=samples, parameter_names=list(manifest.get("parameters", [])))
