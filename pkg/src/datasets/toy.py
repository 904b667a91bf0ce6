from __future__ import annotations

import numpy as np

from src.datasets.dataset import Sample, SnapshotDataset
from src.mesh.triangle_mesh import NodalField, TriangleMesh, rectangle_mesh

TOY_BOUNDS = (-1.0, 1.0, -1.25, 1.25)
TOY_WIDTH = 0.05


def toy_betas(n: int, beta_min: float = -0.38, beta_max: float = 0.38) -> np.ndarray:
    """Endpoint-inclusive uniform grid of bump slopes."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    return np.linspace(beta_min, beta_max, n)


def toy_field(nodes: np.ndarray, beta: float) -> np.ndarray:
    x, y = nodes[:, 0], nodes[:, 1]
    return np.exp(-((beta * (x + 1.0) - y) ** 2) / TOY_WIDTH)


def toy_mesh(nx: int = 48, ny: int = 60) -> TriangleMesh:
    return rectangle_mesh(*TOY_BOUNDS, nx, ny, name="toy")


def generate_toy_dataset(
    n: int = 30, beta_min: float = -0.38, beta_max: float = 0.38, nx: int = 48, ny: int = 60
) -> SnapshotDataset:
    """Gaussian ridges through (-1, 0) with slopes beta_i, all sampled on the same rectangle mesh."""
    mesh = toy_mesh(nx, ny)
    samples = []
    for index, beta in enumerate(toy_betas(n, beta_min, beta_max)):
        name = f"sample_{index:03d}"
        field = NodalField(mesh=mesh, values=toy_field(mesh.nodes, float(beta)), name=name)
        samples.append(Sample(name=name, mesh=mesh, field=field, mu=np.array([beta])))
    return SnapshotDataset(reference=mesh, samples=samples, parameter_names=["beta"])
