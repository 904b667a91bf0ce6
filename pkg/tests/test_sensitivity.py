import numpy as np
import pytest

from src.datasets.dataset import Sample, SnapshotDataset
from src.errors import MeshError
from src.mesh.triangle_mesh import NodalField
from src.morphing.sensitivity import (
    SnapshotEvaluator,
    compute_sensitivity,
    differential_J,
    differential_J_double_sum,
    multiscale_objective,
    objective,
)


def _dataset(mesh, rows, name="s"):
    samples = [
        Sample(name=f"{name}{i}", mesh=mesh, field=NodalField(mesh=mesh, values=row), mu=np.array([float(i)]))
        for i, row in enumerate(rows)
    ]
    return SnapshotDataset(reference=mesh, samples=samples, parameter_names=["i"])


def _family(mesh, bump, count, scale=1.0):
    directions = [(1.0, 0.3), (-0.4, 1.0), (0.7, -0.7), (0.2, 0.9), (-1.0, -0.2), (0.5, 0.5)]
    return np.stack(
        [bump(mesh, scale * 0.015 * (i + 1), directions[i % len(directions)], frequency=1 + i % 2) for i in range(count)]
    )


def test_single_snapshot_is_stationary_at_one(small_toy):
    dataset = small_toy.subset([2])
    evaluator = SnapshotEvaluator(dataset)
    zero = np.zeros((1, dataset.reference.node_count, 2))
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(zero), 1)

    assert sensitivity.J == pytest.approx(1.0)
    assert sensitivity.stationary


def test_identical_snapshots_give_vanishing_fields(small_toy):
    row = small_toy.samples[1].field.values
    dataset = _dataset(small_toy.reference, [row, row, row])
    evaluator = SnapshotEvaluator(dataset)
    zero = np.zeros((3, dataset.reference.node_count, 2))
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(zero), 1)

    assert sensitivity.J == pytest.approx(1.0)
    assert np.abs(sensitivity.fields).max() <= 1e-8


def test_full_rank_has_no_sensitivity(small_toy, bump):
    evaluator = SnapshotEvaluator(small_toy)
    mesh = small_toy.reference
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(np.zeros((small_toy.size, mesh.node_count, 2))), small_toy.size)

    assert sensitivity.J == pytest.approx(1.0)
    assert abs(differential_J(sensitivity, _family(mesh, bump, small_toy.size))) <= 1e-8


def test_zero_direction_has_zero_differential(small_toy):
    evaluator = SnapshotEvaluator(small_toy)
    zero = np.zeros((small_toy.size, small_toy.reference.node_count, 2))
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(zero), 1)

    assert differential_J(sensitivity, zero) == 0.0


def test_load_pairing_matches_eigen_perturbation_formula(small_toy, bump):
    mesh = small_toy.reference
    evaluator = SnapshotEvaluator(small_toy)
    displacements = _family(mesh, bump, small_toy.size)
    directions = _family(mesh, bump, small_toy.size, scale=-3.0)[::-1]
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(displacements), 1)

    expected = differential_J_double_sum(evaluator, sensitivity, directions)
    assert differential_J(sensitivity, directions) == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_differential_matches_central_differences(small_toy, bump):
    mesh = small_toy.reference
    evaluator = SnapshotEvaluator(small_toy)
    displacements = _family(mesh, bump, small_toy.size)
    directions = _family(mesh, bump, small_toy.size, scale=5.0)[::-1]
    sensitivity = compute_sensitivity(evaluator, evaluator.evaluate(displacements), 1)

    h = 1e-7
    forward = objective(evaluator, displacements + h * directions, 1)
    backward = objective(evaluator, displacements - h * directions, 1)
    finite_difference = (forward - backward) / (2.0 * h)
    assert differential_J(sensitivity, directions) == pytest.approx(finite_difference, rel=1e-3)


def test_evaluate_checks_the_family_shape(small_toy):
    evaluator = SnapshotEvaluator(small_toy)

    with pytest.raises(MeshError):
        evaluator.evaluate(np.zeros((small_toy.size - 1, small_toy.reference.node_count, 2)))


def test_multiscale_objective_limits(small_toy):
    evaluator = SnapshotEvaluator(small_toy)
    zero = np.zeros((small_toy.size, small_toy.reference.node_count, 2))
    raw = objective(evaluator, zero, 1)

    assert multiscale_objective(evaluator, zero, 1, 1e8) == pytest.approx(raw, abs=1e-3)
    assert multiscale_objective(evaluator, zero, 1, 1.0) >= raw
    with pytest.raises(ValueError):
        multiscale_objective(evaluator, zero, 1, 0.0)


def test_multiscale_objective_of_constants_is_one(square_mesh):
    rows = [np.full(square_mesh.node_count, value) for value in (1.0, 2.0, -0.5)]
    evaluator = SnapshotEvaluator(_dataset(square_mesh, rows))
    zero = np.zeros((3, square_mesh.node_count, 2))

    assert multiscale_objective(evaluator, zero, 1, 10.0) == pytest.approx(1.0)


def test_smoothed_snapshots_are_cached_per_level(small_toy):
    evaluator = SnapshotEvaluator(small_toy)

    assert evaluator.snapshot_values(10.0) is evaluator.snapshot_values(10.0)
    assert evaluator.snapshot_values(float("inf")) is evaluator.snapshot_values(None)
