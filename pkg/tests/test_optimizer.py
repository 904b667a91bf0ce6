import math

import numpy as np
import pandas as pd
import pytest

from src.datasets.dataset import Sample, SnapshotDataset
from src.datasets.toy import generate_toy_dataset, toy_field
from src.errors import BacktrackingExhaustedError, ConfigError
from src.mesh.triangle_mesh import NodalField, rectangle_mesh
from src.morphing.optimizer import (
    TRACE_COLUMNS,
    ContinuationState,
    MorphingOptimizer,
    OptimizerTrace,
    TraceRecord,
    min_deformed_area,
    optimize,
    restrict_to_mesh,
    transfer_displacement,
)
from src.schemas.run_config import ContinuationC1, ContinuationC2, ElasticParams, OptimizerConfig, PenaltyKind


def _zeros(dataset):
    return np.zeros((dataset.size, dataset.reference.node_count, 2))


def _on_meshes(dataset, meshes):
    samples = [
        Sample(name=sample.name, mesh=mesh, field=NodalField(mesh=mesh, values=toy_field(mesh.nodes, float(sample.mu[0]))), mu=sample.mu)
        for sample, mesh in zip(dataset.samples, meshes)
    ]
    return SnapshotDataset(reference=dataset.reference, samples=samples, parameter_names=dataset.parameter_names)


def test_continuation_alternates_and_switches_off():
    config = OptimizerConfig(
        continuation_c1=ContinuationC1(enabled=True, factor=0.5, trigger=1e-4, floor=0.2, min_interval=1),
        continuation_c2=ContinuationC2(enabled=True, start=1.0, growth=10.0, maximum=50.0, trigger=1e-4, min_interval=1),
    )
    state = ContinuationState.initial(config)

    assert (state.c1, state.c2) == (1.0, 1.0)
    assert state.update(config, 0.5, 0.6) is None
    assert state.update(config, 0.5, 0.5) == "c1"
    assert state.c1 == 0.5
    assert state.update(config, 0.5, 0.5) == "c2"
    assert state.c2 == 10.0
    assert state.update(config, 0.5, 0.5) == "c1"
    assert state.update(config, 0.5, 0.5) == "c2"
    assert math.isinf(state.c2)
    assert state.smoothing is None
    assert state.settled(config)
    assert state.update(config, 0.5, 0.5) == "c1"
    assert state.c1 == 0.125
    assert state.c1_exhausted
    assert state.update(config, 0.5, 0.5) is None


def test_continuation_without_smoothing_starts_unsmoothed():
    state = ContinuationState.initial(OptimizerConfig(c1=0.3))

    assert state.c1 == 0.3
    assert math.isinf(state.c2)
    assert state.update(OptimizerConfig(), 0.5, 0.5) is None


def test_one_c1_halving_per_stagnation_phase():
    config = OptimizerConfig(continuation_c1=ContinuationC1(enabled=True, factor=0.5, trigger=1e-4, min_interval=3))
    state = ContinuationState.initial(config)

    events = [state.update(config, 0.9, 0.9) for _ in range(7)]

    assert events == [None, None, "c1", None, None, "c1", None]
    assert state.c1 == 0.25
    assert state.since_event == 1


def test_c1_below_the_floor_is_frozen_and_the_ascent_goes_on(small_toy):
    config = OptimizerConfig(
        max_iters=4,
        continuation_c1=ContinuationC1(enabled=True, factor=0.5, trigger=1.0, floor=0.3, min_interval=1),
    )
    result = optimize(small_toy, config)

    assert result.reason == "max_iters"
    assert result.iterations == 4
    assert result.continuation.c1_exhausted
    assert result.trace.to_frame()["c1"].tolist() == [1.0, 0.5, 0.25, 0.25]


def test_rank_above_family_size_is_rejected(small_toy):
    with pytest.raises(ConfigError):
        MorphingOptimizer(small_toy, OptimizerConfig(r=small_toy.size + 1))


def test_fast_path_needs_the_reference_domain(small_toy):
    stretched = rectangle_mesh(-1.0, 1.2, -1.25, 1.25, 12, 15)
    dataset = _on_meshes(small_toy, [stretched] * small_toy.size)

    with pytest.raises(ConfigError):
        MorphingOptimizer(dataset, OptimizerConfig())
    optimizer = MorphingOptimizer(dataset, OptimizerConfig(polytopal_fast_path=False))
    assert not optimizer.facet_invariant


def test_one_step_increases_J_and_keeps_bijectivity(small_toy):
    optimizer = MorphingOptimizer(small_toy, OptimizerConfig())
    continuation = ContinuationState.initial(optimizer.config)
    start = optimizer.evaluate(_zeros(small_toy))
    result = optimizer.ascent_step(start, continuation)

    assert result.ascent > 0.0
    assert result.evaluation.J > start.J
    assert result.evaluation.I(continuation.c1) >= start.I(continuation.c1) - 1e-13
    assert min_deformed_area(small_toy.reference, result.evaluation.displacements) > 0.0
    assert result.max_normal_violation <= 1e-3 * small_toy.reference.diameter


def test_fast_path_matches_the_assembled_right_hand_side(small_toy, bump):
    displacements = np.stack([bump(small_toy.reference, 0.02 * (i + 1)) for i in range(small_toy.size)])
    elastic = ElasticParams(penalty_alpha=1e4)
    fast = MorphingOptimizer(small_toy, OptimizerConfig(c1=0.3, elastic=elastic))
    slow = MorphingOptimizer(small_toy, OptimizerConfig(c1=0.3, elastic=elastic, polytopal_fast_path=False))
    evaluation = fast.evaluate(displacements)

    fast_directions, fast_ascent = fast.directions(evaluation, 0.3)
    slow_directions, slow_ascent = slow.directions(evaluation, 0.3)
    scale = np.abs(slow_directions).max()
    assert np.allclose(fast_directions, slow_directions, atol=1e-6 * scale)
    assert fast_ascent == pytest.approx(slow_ascent, rel=1e-6)


def test_trace_records_every_iteration(small_toy, tmp_path):
    result = optimize(small_toy, OptimizerConfig(max_iters=4))
    frame = result.trace.to_frame()

    assert result.reason == "max_iters"
    assert result.iterations == 4
    assert list(frame.columns) == TRACE_COLUMNS
    assert frame["iter"].tolist() == [1, 2, 3, 4]
    assert np.all(np.diff(frame["I"]) >= -1e-12)
    assert np.all(frame["min_area"] > 0.0)
    assert result.final_J > result.initial_J
    assert not result.family.inverted()

    loaded = OptimizerTrace.read_csv(result.trace.write_csv(tmp_path / "trace.csv"))
    assert loaded.records == result.trace.records


def test_trace_csv_keeps_every_bit(tmp_path):
    record = TraceRecord(
        iteration=7,
        J=0.6224616840634083,
        I=0.1 + 0.2,
        c1=2.0**-27,
        c2=math.inf,
        min_area=-1.3212345678901234e-4,
        max_normal_violation=0.0,
        step=2.5,
    )
    trace = OptimizerTrace(records=[record])

    loaded = OptimizerTrace.read_csv(trace.write_csv(tmp_path / "trace.csv"))

    assert loaded.records == [record]
    pd.testing.assert_frame_equal(loaded.to_frame(), trace.to_frame())


def test_runs_are_deterministic_across_worker_counts(small_toy):
    config = OptimizerConfig(max_iters=3)
    serial = optimize(small_toy, config, workers=1)
    threaded = optimize(generate_toy_dataset(n=6, nx=12, ny=15), config, workers=3)

    pd.testing.assert_frame_equal(serial.trace.to_frame(), threaded.trace.to_frame())
    assert np.array_equal(serial.family.displacements, threaded.family.displacements)


def test_identical_snapshots_stop_immediately(small_toy):
    result = optimize(small_toy.subset([0, 0, 0]), OptimizerConfig())

    assert result.reason == "stationary"
    assert result.iterations == 0
    assert len(result.trace) == 0
    assert result.final_J == pytest.approx(1.0)
    assert not np.any(result.family.displacements)


def test_backtracking_shrinks_an_inverting_step(small_toy):
    optimizer = MorphingOptimizer(small_toy, OptimizerConfig(step=1e4))
    continuation = ContinuationState.initial(optimizer.config)
    result = optimizer.ascent_step(optimizer.evaluate(_zeros(small_toy)), continuation)

    assert result.step < 1e4
    assert result.attempts > 0
    assert min_deformed_area(small_toy.reference, result.evaluation.displacements) > 0.0


def test_projected_candidates_pass_the_acceptance_test(small_toy, monkeypatch):
    optimizer = MorphingOptimizer(small_toy, OptimizerConfig(max_backtracks=3))
    reference = small_toy.reference
    center = int(np.argmin(np.linalg.norm(reference.nodes, axis=1)))

    def folding_projection(displacements):
        folded = displacements.copy()
        folded[:, center] += [0.5, 0.0]
        return folded, 1

    monkeypatch.setattr(optimizer, "max_normal_violation", lambda displacements: 1.0)
    monkeypatch.setattr(optimizer, "safeguard", folding_projection)
    start = optimizer.evaluate(_zeros(small_toy))

    with pytest.raises(BacktrackingExhaustedError):
        optimizer.ascent_step(start, ContinuationState.initial(optimizer.config))


def test_exhausted_backtracking_raises_with_the_trace(small_toy):
    with pytest.raises(BacktrackingExhaustedError) as excinfo:
        optimize(small_toy, OptimizerConfig(step=1e4, max_backtracks=0))

    assert not excinfo.value.stationary
    assert isinstance(excinfo.value.trace, OptimizerTrace)


def test_general_path_keeps_the_boundary(small_toy, bump):
    # same boundary, different interior nodes: not facet-invariant
    moved = small_toy.reference.with_nodes(small_toy.reference.nodes + bump(small_toy.reference, 0.03), name="moved")
    dataset = _on_meshes(small_toy, [moved] * small_toy.size)
    config = OptimizerConfig(polytopal_fast_path=False, max_iters=2)
    result = optimize(dataset, config)

    assert np.all(result.trace.to_frame()["min_area"] > 0.0)
    assert result.trace.records[-1].max_normal_violation <= config.safeguard_tolerance * small_toy.reference.diameter
    assert result.final_J >= result.initial_J


def test_neohookean_step_stays_bijective(small_toy):
    config = OptimizerConfig(
        penalty_kind=PenaltyKind.neo_hookean, polytopal_fast_path=False, c1=0.005, max_iters=2
    )
    result = optimize(small_toy, config)

    assert result.final_J > result.initial_J
    assert np.all(np.isfinite(result.evaluation.energies))
    assert not result.family.inverted()


def test_transfer_reproduces_affine_displacements():
    coarse = rectangle_mesh(0.0, 1.0, 0.0, 1.0, 4, 4)
    fine = rectangle_mesh(0.0, 1.0, 0.0, 1.0, 9, 7)

    def affine(nodes):
        return np.column_stack([0.1 * nodes[:, 0] + 0.2 * nodes[:, 1], -0.3 * nodes[:, 0]])

    assert np.allclose(transfer_displacement(coarse, affine(coarse.nodes), fine), affine(fine.nodes), atol=1e-12)


def test_restriction_to_a_coarse_mesh_interpolates_the_snapshots():
    fine = rectangle_mesh(0.0, 1.0, 0.0, 1.0, 8, 6, name="fine")
    coarse = rectangle_mesh(0.0, 1.0, 0.0, 1.0, 4, 3, name="coarse")
    samples = [
        Sample(
            name=f"s{i}",
            mesh=fine,
            field=NodalField(mesh=fine, values=(i + 1.0) * fine.nodes[:, 0] - fine.nodes[:, 1]),
            mu=np.array([float(i)]),
        )
        for i in range(3)
    ]
    restricted = restrict_to_mesh(SnapshotDataset(reference=fine, samples=samples, parameter_names=["i"]), coarse)

    assert restricted.reference is coarse
    assert restricted.shares_reference()
    for i, sample in enumerate(restricted.samples):
        assert np.allclose(sample.field.values, (i + 1.0) * coarse.nodes[:, 0] - coarse.nodes[:, 1], atol=1e-12)


def test_restriction_needs_samples_on_the_reference(small_toy, bump):
    moved = small_toy.reference.with_nodes(small_toy.reference.nodes + bump(small_toy.reference, 0.03), name="moved")

    with pytest.raises(ConfigError):
        restrict_to_mesh(_on_meshes(small_toy, [moved] * small_toy.size), rectangle_mesh(-1.0, 1.0, -1.25, 1.25, 4, 5))


@pytest.mark.slow
def test_toy_continuation_reaches_near_rank_one():
    config = OptimizerConfig(
        r=1,
        step=2.5,
        c1=1.0,
        max_iters=500,
        continuation_c1=ContinuationC1(enabled=True, factor=0.5, trigger=1e-4, floor=1e-8),
    )
    result = optimize(generate_toy_dataset(), config)

    assert 1.0 - result.initial_J > 0.1
    assert 1.0 - result.final_J <= 1e-3
    assert result.continuation.c1 < 1.0
    assert not result.family.inverted()


@pytest.mark.slow
def test_fixed_small_c1_without_guard_folds_elements():
    config = OptimizerConfig(c1=0.005, max_iters=400, bijectivity_guard=False)
    result = optimize(generate_toy_dataset(), config)

    # the fold may relax again before the last iteration
    assert result.first_inversion is not None
    assert result.trace.to_frame()["min_area"].min() < 0.0


@pytest.mark.slow
def test_neohookean_penalty_keeps_bijectivity():
    config = OptimizerConfig(
        penalty_kind=PenaltyKind.neo_hookean, mu=1.0, lame_lambda=0.1, c1=0.005, polytopal_fast_path=False, max_iters=500
    )
    result = optimize(generate_toy_dataset(), config)

    assert not result.family.inverted()
    assert result.final_J >= 0.995


@pytest.mark.slow
def test_two_modes_capture_the_family():
    config = OptimizerConfig(
        r=2,
        penalty_kind=PenaltyKind.neo_hookean,
        c1=0.005,
        polytopal_fast_path=False,
        max_iters=500,
    )
    result = optimize(generate_toy_dataset(), config)

    assert result.eigenvalue_fractions[:2].sum() >= 0.99
    assert not result.family.inverted()
