import numpy as np
import pytest

from src.datasets.toy import generate_toy_dataset
from src.mesh.triangle_mesh import TriangleMesh, rectangle_mesh


@pytest.fixture
def unit_square() -> TriangleMesh:
    return rectangle_mesh(0.0, 1.0, 0.0, 1.0, 4, 4, name="unit")


@pytest.fixture
def square_mesh() -> TriangleMesh:
    return rectangle_mesh(0.0, 1.0, 0.0, 1.0, 10, 10, name="square")


@pytest.fixture
def small_toy():
    return generate_toy_dataset(n=6, nx=12, ny=15)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def bump():
    """Smooth displacement vanishing on the whole boundary of the mesh bounding box."""

    def make(mesh: TriangleMesh, amplitude: float = 0.05, direction=(1.0, 0.5), frequency: int = 1) -> np.ndarray:
        lower = mesh.nodes.min(axis=0)
        span = mesh.nodes.max(axis=0) - lower
        s = (mesh.nodes - lower) / span
        profile = np.sin(np.pi * s[:, 0]) * np.sin(frequency * np.pi * s[:, 1])
        return amplitude * profile[:, None] * np.asarray(direction, dtype=np.float64)[None, :]

    return make
