from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from src.datasets.dataset import Sample, SnapshotDataset
from src.errors import ConfigError, MeshError
from src.fem.assembly import assemble_mass
from src.mesh.io import read_mesh, write_mesh
from src.mesh.locator import PointLocator
from src.mesh.triangle_mesh import NodalField, TriangleMesh, signed_areas
from src.morphing.optimizer import MorphingOptimizer, OptimizationResult
from src.parallel import ordered_map
from src.pod.compress import PodResult, SnapshotFamily, coordinates, correlation_matrix, pod, read_pod, select_rank, write_pod
from src.schemas.run_config import OptimizerConfig, SurrogateConfig
from src.surrogate.gaussian_process import GpModel
from src.surrogate.geometric import GeometricMorphing, geometric_morphing_to

BUNDLE_VERSION = 1
BUNDLE_FILE = "bundle.json"
CLAMP_WARNING = 1e-6


def _leading_modes(result: PodResult, count: int, width: int) -> np.ndarray:
    if count == 0 or result.modes is None or result.modes.size == 0:
        return np.zeros((0, width))
    return np.asarray(result.modes[:count]).reshape(count, width)


@dataclass(frozen=True, eq=False)
class SurrogateBundle:
    """Everything needed to predict a field on an unseen geometry.

    Modes are stored flattened on the reference mesh: geometric and optimal
    morphing modes interleave the two displacement components per node.
    """

    reference: TriangleMesh
    parameter_names: list[str]
    geometry_pod: PodResult
    morphing_pod: PodResult
    field_pod: PodResult
    n_geo: int
    n_opt: int
    r: int
    model_r: GpModel
    model_o: GpModel
    metadata: dict = field(default_factory=dict)

    @property
    def geometry_modes(self) -> np.ndarray:
        return _leading_modes(self.geometry_pod, self.n_geo, 2 * self.reference.node_count)

    @property
    def morphing_modes(self) -> np.ndarray:
        return _leading_modes(self.morphing_pod, self.n_opt, 2 * self.reference.node_count)

    @property
    def field_modes(self) -> np.ndarray:
        return _leading_modes(self.field_pod, self.r, self.reference.node_count)

    @cached_property
    def vector_mass(self):
        return assemble_mass(self.reference, components=2)

    @cached_property
    def locator(self) -> PointLocator:
        return PointLocator(self.reference)

    def geometric_coordinates(self, displacement: np.ndarray) -> np.ndarray:
        """alpha_j = <phi_geo - Id, zeta_geo_j> in L2(Omega_0)."""
        flat = np.asarray(displacement, dtype=np.float64).reshape(-1)
        return self.geometry_modes @ (self.vector_mass @ flat)

    def inputs(self, mu: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        if len(mu) != len(self.parameter_names):
            raise ValueError(f"expected {len(self.parameter_names)} parameter(s) {self.parameter_names}, got {len(mu)}")
        return np.concatenate([mu, np.asarray(alpha, dtype=np.float64).reshape(-1)])


@dataclass
class TrainingResult:
    bundle: SurrogateBundle
    geometric: list[GeometricMorphing]
    optimal_displacements: np.ndarray
    optimization: OptimizationResult | None
    reconstruction_errors: np.ndarray


def geometric_morphings(dataset: SnapshotDataset, workers: int = 1) -> list[GeometricMorphing]:
    if not dataset.shares_topology():
        raise MeshError("every sample mesh must share the reference topology")
    return ordered_map(lambda sample: geometric_morphing_to(dataset.reference, sample.mesh), dataset.samples, workers)


def pull_back_snapshots(
    dataset: SnapshotDataset, displacements: np.ndarray, workers: int = 1
) -> SnapshotDataset:
    """u_i o phi_geo_i at the reference nodes, as a dataset living entirely on the reference mesh."""
    reference = dataset.reference
    locators: dict[int, PointLocator] = {}

    def pull(index: int) -> Sample:
        sample = dataset.samples[index]
        displacement = displacements[index]
        if sample.mesh is reference and not np.any(displacement):
            values = sample.field.values
        else:
            location = locators[id(sample.mesh)].locate(reference.nodes + displacement)
            values = location.interpolate(sample.mesh, sample.field.values)
        return Sample(
            name=sample.name, mesh=reference, field=NodalField(mesh=reference, values=values, name=sample.name), mu=sample.mu
        )

    # locators are built serially so the worker threads only read them
    for sample in dataset.samples:
        if id(sample.mesh) not in locators:
            locators[id(sample.mesh)] = PointLocator(sample.mesh)
    samples = ordered_map(pull, range(dataset.size), workers)
    return SnapshotDataset(reference=reference, samples=samples, parameter_names=dataset.parameter_names)


def compose_on_reference(
    reference: TriangleMesh, values: np.ndarray, displacements: np.ndarray, locator: PointLocator | None = None
) -> np.ndarray:
    """Rows u_i o phi_opt_i at the reference nodes for nodal rows u_i on the reference mesh."""
    locator = locator or PointLocator(reference)
    out = np.empty_like(values)
    for index, displacement in enumerate(displacements):
        if not np.any(displacement):
            out[index] = values[index]
            continue
        location = locator.locate(reference.nodes + displacement)
        out[index] = location.interpolate(reference, values[index])
    return out


def _family_pod(family: SnapshotFamily, label: str) -> PodResult:
    result = pod(correlation_matrix(family), 1, family)
    if 0 < result.rank < family.size:
        logger.warning("{} POD is rank deficient: numerical rank {} of {}", label, result.rank, family.size)
    return result


def train(
    dataset: SnapshotDataset,
    config: SurrogateConfig,
    optimizer: OptimizerConfig,
    seed: int = 0,
    workers: int = 1,
    optimal_displacements: np.ndarray | None = None,
    geometric: list[GeometricMorphing] | None = None,
) -> TrainingResult:
    """Offline stage: geometric morphings, optimal morphings, three PODs and the two GP models.

    ``optimal_displacements`` (morphings of the pulled-back snapshots) skip the
    optimization when given.
    """
    reference = dataset.reference
    nodes = reference.node_count
    geometric = geometric if geometric is not None else geometric_morphings(dataset, workers)
    vector_mass = assemble_mass(reference, components=2)
    scalar_mass = assemble_mass(reference)

    geo_displacements = np.stack([morphing.displacement for morphing in geometric])
    geo_family = SnapshotFamily.from_nodal(reference, geo_displacements, vector_mass)
    geometry_pod = _family_pod(geo_family, "geometric morphing")
    n_geo = select_rank(geometry_pod, config.energy_threshold, config.n_geo)
    alpha = coordinates(geo_family, _leading_modes(geometry_pod, n_geo, 2 * nodes)) if n_geo else np.zeros((dataset.size, 0))

    pulled = pull_back_snapshots(dataset, geo_displacements, workers)
    optimization = None
    if optimal_displacements is None:
        optimization = MorphingOptimizer(pulled, optimizer, workers=workers).optimize()
        optimal_displacements = optimization.family.displacements
    optimal_displacements = np.asarray(optimal_displacements, dtype=np.float64)
    if optimal_displacements.shape != (dataset.size, nodes, 2):
        raise ValueError(f"optimal morphings have shape {optimal_displacements.shape}, expected {(dataset.size, nodes, 2)}")

    opt_family = SnapshotFamily.from_nodal(reference, optimal_displacements, vector_mass)
    morphing_pod = _family_pod(opt_family, "optimal morphing")
    n_opt = select_rank(morphing_pod, config.energy_threshold, config.n_opt)
    beta = (
        coordinates(opt_family, _leading_modes(morphing_pod, n_opt, 2 * nodes)) if n_opt else np.zeros((dataset.size, 0))
    )

    pulled_values = np.stack([sample.field.values for sample in pulled.samples])
    morphed = compose_on_reference(reference, pulled_values, optimal_displacements)
    field_family = SnapshotFamily.from_nodal(reference, morphed, scalar_mass)
    field_pod = _family_pod(field_family, "field")
    r = min(config.r, field_pod.rank)
    if r < config.r:
        logger.warning("field POD has rank {}; using {} mode(s) instead of {}", field_pod.rank, r, config.r)
    field_modes = _leading_modes(field_pod, r, nodes)
    gamma = coordinates(field_family, field_modes)

    projected = gamma @ field_modes
    error = np.sqrt(np.einsum("ij,ij->i", morphed - projected, (scalar_mass @ (morphed - projected).T).T))
    norm = np.sqrt(np.einsum("ij,ij->i", morphed, (scalar_mass @ morphed.T).T))
    reconstruction = error / np.where(norm > 0.0, norm, 1.0)

    inputs = np.hstack([dataset.parameters, alpha])
    model_r = GpModel(config.gp_restarts, config.gp_min_noise, seed=seed, workers=workers).fit(inputs, beta)
    model_o = GpModel(config.gp_restarts, config.gp_min_noise, seed=seed, workers=workers).fit(inputs, gamma)
    logger.info(
        "Trained surrogate on {} sample(s): n_geo={}, n_opt={}, r={}, max reconstruction error {:.3e}",
        dataset.size,
        n_geo,
        n_opt,
        r,
        float(reconstruction.max()),
    )
    bundle = SurrogateBundle(
        reference=reference,
        parameter_names=list(dataset.parameter_names),
        geometry_pod=geometry_pod,
        morphing_pod=morphing_pod,
        field_pod=field_pod,
        n_geo=n_geo,
        n_opt=n_opt,
        r=r,
        model_r=model_r,
        model_o=model_o,
        metadata={"samples": [sample.name for sample in dataset.samples], "seed": seed},
    )
    return TrainingResult(
        bundle=bundle,
        geometric=geometric,
        optimal_displacements=optimal_displacements,
        optimization=optimization,
        reconstruction_errors=reconstruction,
    )


def predict(bundle: SurrogateBundle, mesh: TriangleMesh, mu: np.ndarray, name: str = "prediction") -> NodalField:
    """Online stage: evaluate the predicted field at every node of ``mesh``.

    Each node y is located in the reference mesh deformed by phi_geo o phi_opt;
    the barycentric coordinates found there interpolate the predicted reference
    field, which evaluates u_opt o phi_opt^-1 o phi_geo^-1 without inverting a map.
    """
    reference = bundle.reference
    geometric = geometric_morphing_to(reference, mesh)
    alpha = bundle.geometric_coordinates(geometric.displacement)
    x = bundle.inputs(mu, alpha)[None, :]
    beta = bundle.model_r.predict(x)[0]
    gamma = bundle.model_o.predict(x)[0]

    optimal = (beta @ bundle.morphing_modes).reshape(-1, 2) if bundle.n_opt else np.zeros((reference.node_count, 2))
    reference_field = gamma @ bundle.field_modes

    intermediate = reference.nodes + optimal
    if np.any(geometric.displacement):
        location = bundle.locator.locate(intermediate)
        positions = intermediate + location.interpolate(reference, geometric.displacement)
    else:
        positions = intermediate
    inverted = int(np.sum(signed_areas(positions, reference.triangles) <= 0.0))
    if inverted:
        logger.warning("Predicted morphing onto {} inverts {} triangle(s); evaluation is clamped", mesh.name, inverted)

    deformed = reference.with_nodes(positions, name=f"{reference.name}:predicted")
    locator = PointLocator(deformed)
    location = locator.locate(mesh.nodes)
    if location.clamped.any():
        distance = locator.boundary_distance(mesh.nodes[location.clamped])
        far = int(np.sum(distance > CLAMP_WARNING * reference.diameter))
        if far:
            logger.warning("{} node(s) of {} lie outside the predicted morphed domain", far, mesh.name)
    return NodalField(mesh=mesh, values=location.interpolate(deformed, reference_field), name=name)


def relative_l2_error(mesh: TriangleMesh, predicted: np.ndarray, truth: np.ndarray) -> float:
    mass = assemble_mass(mesh)
    error = predicted - truth
    denominator = float(truth @ (mass @ truth))
    return float(np.sqrt((error @ (mass @ error)) / denominator)) if denominator > 0.0 else float(np.sqrt(error @ (mass @ error)))


def rmse_report(
    bundle: SurrogateBundle | None, samples: list[Sample], predictions: list[NodalField] | None = None
) -> pd.DataFrame:
    """Per-sample RMSE and relative L2 error on each sample's own mesh, plus a pooled ``overall`` row.

    The pooled RMSE averages squared nodal errors over all samples and nodes.
    """
    if predictions is None:
        if bundle is None:
            raise ValueError("rmse_report needs a bundle or precomputed predictions")
        predictions = [predict(bundle, sample.mesh, sample.mu, name=sample.name) for sample in samples]
    if len(predictions) != len(samples):
        raise ValueError(f"{len(predictions)} prediction(s) for {len(samples)} sample(s)")
    rows = []
    squared = 0.0
    count = 0
    for sample, prediction in zip(samples, predictions):
        error = prediction.values - sample.field.values
        squared += float(error @ error)
        count += len(error)
        rows.append(
            {
                "sample": sample.name,
                "nodes": len(error),
                "rmse": float(np.sqrt(np.mean(error**2))),
                "relative_l2": relative_l2_error(sample.mesh, prediction.values, sample.field.values),
            }
        )
    frame = pd.DataFrame(rows, columns=["sample", "nodes", "rmse", "relative_l2"])
    overall = {
        "sample": "overall",
        "nodes": count,
        "rmse": float(np.sqrt(squared / count)) if count else 0.0,
        "relative_l2": float(frame["relative_l2"].mean()) if len(frame) else 0.0,
    }
    return pd.concat([frame, pd.DataFrame([overall])], ignore_index=True)


def leave_one_out(
    dataset: SnapshotDataset,
    config: SurrogateConfig,
    optimizer: OptimizerConfig,
    seed: int = 0,
    workers: int = 1,
    optimal_displacements: np.ndarray | None = None,
) -> tuple[pd.DataFrame, list[NodalField]]:
    """Leave-one-out evaluation.

    With ``loo_morphings="per_fold"`` every fold optimizes its morphings on the
    remaining samples only. ``"shared"`` optimizes once on the full set (or takes
    ``optimal_displacements``) and reuses the result in every fold, so the held-out
    snapshot takes part in the optimization.
    """
    if dataset.size < 2:
        raise ConfigError("leave-one-out needs at least two samples")
    geometric = geometric_morphings(dataset, workers)
    shared = config.loo_morphings == "shared"
    if not shared and optimal_displacements is not None:
        logger.warning("Ignoring precomputed morphings: leave-one-out optimizes them per fold")
        optimal_displacements = None
    if shared and optimal_displacements is None:
        pulled = pull_back_snapshots(dataset, np.stack([m.displacement for m in geometric]), workers)
        optimal_displacements = MorphingOptimizer(pulled, optimizer, workers=workers).optimize().family.displacements
    predictions = []
    for held_out in range(dataset.size):
        keep = [index for index in range(dataset.size) if index != held_out]
        fold = train(
            dataset.subset(keep),
            config,
            optimizer,
            seed=seed,
            workers=workers,
            optimal_displacements=optimal_displacements[keep] if shared else None,
            geometric=[geometric[index] for index in keep],
        )
        sample = dataset.samples[held_out]
        predictions.append(predict(fold.bundle, sample.mesh, sample.mu, name=sample.name))
        logger.debug("LOO fold {} of {} done", held_out + 1, dataset.size)
    report = rmse_report(None, dataset.samples, predictions)
    logger.info("Leave-one-out over {} sample(s): mean relative L2 error {:.4e}", dataset.size, report["relative_l2"].iloc[-1])
    return report, predictions


def evaluate_split(bundle: SurrogateBundle, test: SnapshotDataset) -> tuple[pd.DataFrame, list[NodalField]]:
    predictions = [predict(bundle, sample.mesh, sample.mu, name=sample.name) for sample in test.samples]
    return rmse_report(bundle, test.samples, predictions), predictions


def save_bundle(directory: str | Path, bundle: SurrogateBundle) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_mesh(directory / "reference.mesh", bundle.reference)
    write_pod(directory / "geometry.pod", bundle.geometry_pod, bundle.n_geo)
    write_pod(directory / "morphing.pod", bundle.morphing_pod, bundle.n_opt)
    write_pod(directory / "field.pod", bundle.field_pod, bundle.r)
    payload = {
        "schema_version": BUNDLE_VERSION,
        "parameter_names": bundle.parameter_names,
        "n_geo": bundle.n_geo,
        "n_opt": bundle.n_opt,
        "r": bundle.r,
        "model_r": bundle.model_r.to_dict(),
        "model_o": bundle.model_o.to_dict(),
        "metadata": bundle.metadata,
    }
    path = directory / BUNDLE_FILE
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    logger.info("Saved surrogate bundle to {}", directory)
    return path


def load_bundle(directory: str | Path) -> SurrogateBundle:
    directory = Path(directory)
    path = directory / BUNDLE_FILE
    if not path.is_file():
        raise ConfigError(f"no trained surrogate bundle at {directory} (missing {BUNDLE_FILE})")
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("schema_version") != BUNDLE_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {payload.get('schema_version')!r}")
    return SurrogateBundle(
        reference=read_mesh(directory / "reference.mesh"),
        parameter_names=list(payload["parameter_names"]),
        geometry_pod=read_pod(directory / "geometry.pod"),
        morphing_pod=read_pod(directory / "morphing.pod"),
        field_pod=read_pod(directory / "field.pod"),
        n_geo=int(payload["n_geo"]),
        n_opt=int(payload["n_opt"]),
        r=int(payload["r"]),
        model_r=GpModel.from_dict(payload["model_r"]),
        model_o=GpModel.from_dict(payload["model_o"]),
        metadata=payload.get("metadata", {}),
    )
