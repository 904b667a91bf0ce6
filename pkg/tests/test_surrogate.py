from types import SimpleNamespace

import numpy as np
import pytest

from src.datasets.dataset import Sample, SnapshotDataset
from src.datasets.toy import generate_toy_dataset
from src.errors import ConfigError, GeometricMorphingError, MeshError
from src.mesh.triangle_mesh import NodalField, rectangle_mesh
from src.schemas.run_config import OptimizerConfig, SurrogateConfig
from src.surrogate.gaussian_process import GpHyperparameters, GpModel
from src.surrogate.geometric import geometric_morphing_to, rbf_geometric_morphing
from src.surrogate.ommgp import leave_one_out, load_bundle, predict, rmse_report, save_bundle, train

FAST_SURROGATE = SurrogateConfig(r=1, gp_restarts=3)


def _frozen(dataset):
    return np.zeros((dataset.size, dataset.reference.node_count, 2))


def _shifted(dataset):
    """Small interior shifts standing in for optimized morphings."""
    nodes = dataset.reference.nodes
    profile = np.cos(0.5 * np.pi * nodes[:, 0]) * np.cos(0.4 * np.pi * nodes[:, 1])
    return np.stack([np.column_stack([np.zeros(len(nodes)), 0.3 * float(s.mu[0]) * profile]) for s in dataset.samples])


def test_rbf_morphing_reproduces_affine_maps(square_mesh):
    matrix = np.array([[1.1, 0.2], [-0.1, 0.9]])
    shift = np.array([0.3, -0.2])
    boundary = square_mesh.nodes[square_mesh.boundary_nodes] @ matrix.T + shift
    morphing = rbf_geometric_morphing(square_mesh, boundary)

    assert morphing.method == "rbf"
    assert np.allclose(square_mesh.nodes + morphing.displacement, square_mesh.nodes @ matrix.T + shift, atol=1e-8)
    assert np.allclose(
        square_mesh.nodes[square_mesh.boundary_nodes] + morphing.displacement[square_mesh.boundary_nodes], boundary, atol=1e-15
    )


def test_rbf_morphing_of_identical_boundary_is_identity(square_mesh):
    morphing = geometric_morphing_to(square_mesh, square_mesh.with_nodes(square_mesh.nodes.copy()))

    assert morphing.method == "identity"
    assert not np.any(morphing.displacement)
    assert morphing.as_field().components == 2


def test_rbf_morphing_rejects_reflections(square_mesh):
    boundary = square_mesh.nodes[square_mesh.boundary_nodes] * np.array([-1.0, 1.0])

    with pytest.raises(GeometricMorphingError):
        rbf_geometric_morphing(square_mesh, boundary)


def test_rbf_morphing_checks_correspondence(square_mesh, unit_square):
    with pytest.raises(ValueError):
        rbf_geometric_morphing(square_mesh, square_mesh.nodes[:5])
    with pytest.raises(MeshError):
        geometric_morphing_to(square_mesh, unit_square)


def test_gp_reproduces_training_targets_at_vanishing_noise():
    x = np.linspace(0.0, 1.0, 6)
    y = np.sin(2.0 * np.pi * x)
    hyperparameters = [GpHyperparameters(length_scales=np.array([0.5]), signal=1.0, noise=1e-10)]
    model = GpModel().fit(x, y, hyperparameters)

    assert np.allclose(model.predict(x)[:, 0], y, atol=1e-5 * np.abs(y).max())


def test_gp_learns_a_smooth_curve():
    x = np.linspace(0.0, 1.0, 12)
    model = GpModel(restarts=4).fit(x, np.column_stack([np.sin(3.0 * x), x**2]))
    midpoints = 0.5 * (x[1:] + x[:-1])
    mean, variance = model.predict(midpoints[:, None], return_variance=True)

    assert np.allclose(mean[:, 0], np.sin(3.0 * midpoints), atol=1e-2)
    assert np.allclose(mean[:, 1], midpoints**2, atol=1e-2)
    assert np.all(variance >= 0.0)
    assert model.noise_std().shape == (2,)
    training = model.predict(x[:, None])
    assert np.all(np.abs(training[:, 0] - np.sin(3.0 * x)) <= 2.0 * model.noise_std()[0] + 1e-4)


def test_gp_does_not_depend_on_sample_order(rng):
    x = rng.uniform(size=(9, 2))
    y = np.column_stack([np.cos(x[:, 0]) + x[:, 1], x[:, 0] * x[:, 1]])
    order = rng.permutation(9)
    queries = rng.uniform(size=(4, 2))

    first = GpModel(restarts=3).fit(x, y).predict(queries)
    second = GpModel(restarts=3).fit(x[order], y[order]).predict(queries)
    assert np.allclose(first, second, rtol=0.0, atol=1e-12)


def test_gp_survives_serialization(rng):
    x = rng.uniform(size=(7, 1))
    model = GpModel(restarts=2).fit(x, np.exp(x))
    restored = GpModel.from_dict(model.to_dict())

    assert np.array_equal(restored.predict(x), model.predict(x))


def test_gp_checks_inputs():
    with pytest.raises(RuntimeError):
        GpModel().predict(np.zeros((1, 1)))
    model = GpModel(restarts=1).fit(np.linspace(0.0, 1.0, 4), np.arange(4.0))
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        GpModel().fit(np.zeros((3, 1)), np.zeros((2, 1)))


def test_identity_morphings_predict_the_reconstructed_field(small_toy):
    result = train(small_toy, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=_frozen(small_toy))
    bundle = result.bundle
    mu = np.array([0.05])
    prediction = predict(bundle, small_toy.reference, mu)
    expected = bundle.model_o.predict(bundle.inputs(mu, np.zeros(0))[None, :])[0] @ bundle.field_modes

    assert (bundle.n_geo, bundle.n_opt, bundle.r) == (0, 0, 1)
    assert np.allclose(prediction.values, expected, atol=1e-12)
    assert result.optimization is None
    assert result.reconstruction_errors.shape == (small_toy.size,)


def test_constant_fields_are_predicted_exactly(square_mesh):
    samples = [
        Sample(name=f"c{i}", mesh=square_mesh, field=NodalField(mesh=square_mesh, values=np.full(square_mesh.node_count, 3.0)), mu=np.array([float(i)]))
        for i in range(4)
    ]
    dataset = SnapshotDataset(reference=square_mesh, samples=samples, parameter_names=["i"])
    bundle = train(dataset, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=_frozen(dataset)).bundle

    assert np.allclose(predict(bundle, square_mesh, np.array([1.5])).values, 3.0, atol=1e-6)


def test_predict_checks_the_parameter_count(small_toy):
    bundle = train(small_toy, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=_frozen(small_toy)).bundle

    with pytest.raises(ValueError):
        predict(bundle, small_toy.reference, np.array([0.1, 0.2]))


def test_bundle_round_trip_keeps_predictions(small_toy, tmp_path):
    optimal = _shifted(small_toy)
    bundle = train(small_toy, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=optimal).bundle
    save_bundle(tmp_path / "bundle", bundle)
    loaded = load_bundle(tmp_path / "bundle")
    mu = np.array([-0.1])

    assert loaded.n_opt == bundle.n_opt
    assert np.allclose(
        predict(loaded, small_toy.reference, mu).values, predict(bundle, small_toy.reference, mu).values, atol=1e-12
    )


def test_missing_bundle_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_bundle(tmp_path)


def test_rmse_of_a_constant_shift(small_toy):
    predictions = [
        NodalField(mesh=sample.mesh, values=sample.field.values + 0.25, name=sample.name) for sample in small_toy.samples
    ]
    report = rmse_report(None, small_toy.samples, predictions)
    exact = rmse_report(None, small_toy.samples, [sample.field for sample in small_toy.samples])

    assert list(report.columns) == ["sample", "nodes", "rmse", "relative_l2"]
    assert report["sample"].iloc[-1] == "overall"
    assert np.allclose(report["rmse"], 0.25)
    assert np.allclose(exact["rmse"], 0.0)
    assert np.allclose(exact["relative_l2"], 0.0)


def test_leave_one_out_needs_two_samples(small_toy):
    with pytest.raises(ConfigError):
        leave_one_out(small_toy.subset([0]), FAST_SURROGATE, OptimizerConfig())


class _RecordingOptimizer:
    seen: list[list[str]] = []

    def __init__(self, dataset, config, workers=1):
        self.dataset = dataset
        _RecordingOptimizer.seen.append([sample.name for sample in dataset.samples])

    def optimize(self):
        return SimpleNamespace(family=SimpleNamespace(displacements=_frozen(self.dataset)))


def test_leave_one_out_folds_never_optimize_on_the_held_out_sample(small_toy, monkeypatch):
    dataset = small_toy.subset([0, 1, 2, 3])
    monkeypatch.setattr("src.surrogate.ommgp.MorphingOptimizer", _RecordingOptimizer)
    monkeypatch.setattr(_RecordingOptimizer, "seen", [])

    leave_one_out(dataset, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=_shifted(dataset))

    names = [sample.name for sample in dataset.samples]
    assert len(_RecordingOptimizer.seen) == len(names)
    for held_out, seen in zip(names, _RecordingOptimizer.seen):
        assert held_out not in seen
        assert sorted(seen) == sorted(name for name in names if name != held_out)


def test_shared_leave_one_out_optimizes_once(small_toy, monkeypatch):
    dataset = small_toy.subset([0, 1, 2, 3])
    monkeypatch.setattr("src.surrogate.ommgp.MorphingOptimizer", _RecordingOptimizer)
    monkeypatch.setattr(_RecordingOptimizer, "seen", [])
    shared = FAST_SURROGATE.model_copy(update={"loo_morphings": "shared"})

    report, _ = leave_one_out(dataset, shared, OptimizerConfig())

    assert _RecordingOptimizer.seen == [[sample.name for sample in dataset.samples]]
    assert report["sample"].iloc[-1] == "overall"


def test_stretched_geometry_goes_through_the_geometric_morphing():
    reference = rectangle_mesh(0.0, 1.0, 0.0, 1.0, 8, 8, name="ref")
    samples = []
    for i, width in enumerate((0.9, 1.0, 1.1, 1.2)):
        mesh = reference.with_nodes(reference.nodes * np.array([width, 1.0]), name=f"w{i}")
        values = np.sin(np.pi * mesh.nodes[:, 0] / width) * mesh.nodes[:, 1]
        samples.append(Sample(name=mesh.name, mesh=mesh, field=NodalField(mesh=mesh, values=values), mu=np.array([float(i)])))
    dataset = SnapshotDataset(reference=reference, samples=samples, parameter_names=["i"])
    result = train(dataset, FAST_SURROGATE, OptimizerConfig(), optimal_displacements=_frozen(dataset))

    assert result.bundle.n_geo == 1
    assert [morphing.method for morphing in result.geometric] == ["rbf", "identity", "rbf", "rbf"]
    prediction = predict(result.bundle, samples[2].mesh, samples[2].mu)
    assert np.allclose(prediction.values, samples[2].field.values, atol=1e-3)


@pytest.mark.slow
def test_toy_leave_one_out_error():
    dataset = generate_toy_dataset()
    optimizer = OptimizerConfig(
        max_iters=500,
        continuation_c1={"enabled": True, "factor": 0.5, "trigger": 1e-4, "floor": 1e-8},
    )
    report, predictions = leave_one_out(dataset, SurrogateConfig(r=1), optimizer)
    errors = np.concatenate([p.values - s.field.values for p, s in zip(predictions, dataset.samples)])

    assert report["relative_l2"].iloc[-1] <= 0.05
    assert report["rmse"].iloc[-1] == pytest.approx(np.sqrt(np.mean(errors**2)), abs=1e-12)
