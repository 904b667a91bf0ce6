from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy import linalg, optimize

from src.errors import NumericalError
from src.parallel import ordered_map

LOG_SCALE_BOUNDS = (np.log(1e-3), np.log(1e3))
LOG_SIGNAL_BOUNDS = (np.log(1e-4), np.log(1e4))
MAX_NOISE = 1.0


def _as_rows(values: np.ndarray, width: int | None = None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return values[:, None] if width != len(values) else values[None, :]
    return values


def _standardize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0) if len(values) else np.zeros(values.shape[1])
    std = values.std(axis=0) if len(values) else np.ones(values.shape[1])
    return mean, np.where(std > 0.0, std, 1.0)


def squared_exponential(left: np.ndarray, right: np.ndarray, length_scales: np.ndarray, signal: float) -> np.ndarray:
    """Anisotropic squared-exponential kernel between standardized inputs."""
    scaled_left = left / length_scales
    scaled_right = right / length_scales
    distance = (
        np.sum(scaled_left**2, axis=1)[:, None] + np.sum(scaled_right**2, axis=1)[None, :] - 2.0 * scaled_left @ scaled_right.T
    )
    return signal * np.exp(-0.5 * np.maximum(distance, 0.0))


@dataclass(frozen=True)
class GpHyperparameters:
    length_scales: np.ndarray
    signal: float
    noise: float

    def to_dict(self) -> dict:
        return {"length_scales": self.length_scales.tolist(), "signal": self.signal, "noise": self.noise}

    @classmethod
    def from_dict(cls, payload: dict) -> GpHyperparameters:
        return cls(
            length_scales=np.asarray(payload["length_scales"], dtype=np.float64),
            signal=float(payload["signal"]),
            noise=float(payload["noise"]),
        )


class ScalarGp:
    """GP regression of one standardized output coordinate; hyperparameters maximize the log marginal likelihood."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, hyperparameters: GpHyperparameters):
        self.inputs = inputs
        self.targets = targets
        self.hyperparameters = hyperparameters
        kernel = self._kernel(inputs, inputs) + hyperparameters.noise * np.eye(len(inputs))
        self._factor = linalg.cho_factor(kernel, lower=True)
        self._weights = linalg.cho_solve(self._factor, targets)

    def _kernel(self, left: np.ndarray, right: np.ndarray) -> np.ndarray:
        return squared_exponential(left, right, self.hyperparameters.length_scales, self.hyperparameters.signal)

    def predict(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cross = self._kernel(inputs, self.inputs)
        mean = cross @ self._weights
        solved = linalg.cho_solve(self._factor, cross.T)
        variance = self.hyperparameters.signal - np.einsum("ij,ji->i", cross, solved)
        return mean, np.maximum(variance, 0.0)


def log_marginal_likelihood(inputs: np.ndarray, targets: np.ndarray, hyperparameters: GpHyperparameters) -> float:
    kernel = squared_exponential(inputs, inputs, hyperparameters.length_scales, hyperparameters.signal)
    kernel[np.diag_indices_from(kernel)] += hyperparameters.noise
    try:
        factor = linalg.cho_factor(kernel, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    weights = linalg.cho_solve(factor, targets)
    return float(
        -0.5 * targets @ weights - np.sum(np.log(np.diag(factor[0]))) - 0.5 * len(targets) * np.log(2.0 * np.pi)
    )


def fit_hyperparameters(
    inputs: np.ndarray,
    targets: np.ndarray,
    restarts: int = 16,
    min_noise: float = 1e-10,
    noise: float | None = None,
    seed: int = 0,
) -> GpHyperparameters:
    """Multi-start Powell search in log space; the first start is unit scales with small noise."""
    dims = inputs.shape[1]
    bounds = [LOG_SCALE_BOUNDS] * dims + [LOG_SIGNAL_BOUNDS]
    if noise is None:
        bounds.append((np.log(min_noise), np.log(MAX_NOISE)))

    def unpack(theta: np.ndarray) -> GpHyperparameters:
        return GpHyperparameters(
            length_scales=np.exp(theta[:dims]),
            signal=float(np.exp(theta[dims])),
            noise=float(np.exp(theta[dims + 1])) if noise is None else noise,
        )

    def objective(theta: np.ndarray) -> float:
        value = log_marginal_likelihood(inputs, targets, unpack(theta))
        return -value if np.isfinite(value) else 1e300

    rng = np.random.default_rng(seed)
    lower = np.array([bound[0] for bound in bounds])
    upper = np.array([bound[1] for bound in bounds])
    first = np.zeros(len(bounds))
    if noise is None:
        first[-1] = max(np.log(1e-6), lower[-1])
    starts = [first] + [rng.uniform(lower, upper) for _ in range(restarts - 1)]

    best_theta, best_value = first, objective(first)
    for start in starts:
        result = optimize.minimize(objective, start, method="Powell", bounds=bounds)
        theta = np.clip(result.x, lower, upper)
        value = objective(theta)
        if value < best_value:
            best_theta, best_value = theta, value
    if best_value >= 1e300:
        raise NumericalError("no GP hyperparameters give a positive definite kernel matrix")
    return unpack(best_theta)


class GpModel:
    """Independent scalar GPs per output coordinate on standardized inputs and outputs.

    Training pairs are sorted lexicographically before fitting, so the model
    does not depend on the order of the training samples.
    """

    def __init__(
        self,
        restarts: int = 16,
        min_noise: float = 1e-10,
        noise: float | None = None,
        seed: int = 0,
        workers: int = 1,
    ):
        self.restarts = restarts
        self.min_noise = min_noise
        self.noise = noise
        self.seed = seed
        self.workers = workers
        self.input_mean = self.input_std = self.output_mean = self.output_std = None
        self.inputs: np.ndarray | None = None
        self.outputs: np.ndarray | None = None
        self.coordinates: list[ScalarGp] = []

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    @property
    def hyperparameters(self) -> list[GpHyperparameters]:
        return [gp.hyperparameters for gp in self.coordinates]

    def fit(
        self, inputs: np.ndarray, outputs: np.ndarray, hyperparameters: list[GpHyperparameters] | None = None
    ) -> GpModel:
        inputs = _as_rows(inputs)
        outputs = _as_rows(outputs)
        if len(inputs) != len(outputs):
            raise ValueError(f"{len(inputs)} input rows but {len(outputs)} output rows")
        if len(inputs) == 0:
            raise ValueError("cannot fit a GP without training samples")
        keys = np.column_stack([inputs, outputs]).T[::-1]
        order = np.lexsort(keys) if len(keys) else np.arange(len(inputs))
        self.inputs, self.outputs = inputs[order], outputs[order]
        self.input_mean, self.input_std = _standardize(self.inputs)
        self.output_mean, self.output_std = _standardize(self.outputs)
        x = (self.inputs - self.input_mean) / self.input_std
        y = (self.outputs - self.output_mean) / self.output_std

        def fit_one(column: int) -> ScalarGp:
            if hyperparameters is not None:
                chosen = hyperparameters[column]
            else:
                chosen = fit_hyperparameters(
                    x, y[:, column], self.restarts, self.min_noise, self.noise, seed=self.seed + column
                )
            return ScalarGp(x, y[:, column], chosen)

        self.coordinates = ordered_map(fit_one, range(self.output_dim), self.workers)
        if hyperparameters is None and self.coordinates:
            logger.info(
                "Fitted {} GP coordinate(s) on {} sample(s), noise range [{:.2e}, {:.2e}]",
                self.output_dim,
                len(x),
                min(gp.hyperparameters.noise for gp in self.coordinates),
                max(gp.hyperparameters.noise for gp in self.coordinates),
            )
        return self

    def predict(self, inputs: np.ndarray, return_variance: bool = False):
        if self.inputs is None:
            raise RuntimeError("GpModel.predict called before fit")
        inputs = _as_rows(inputs, self.input_dim)
        if inputs.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input column(s), got {inputs.shape[1]}")
        x = (inputs - self.input_mean) / self.input_std
        mean = np.empty((len(x), self.output_dim))
        variance = np.empty((len(x), self.output_dim))
        for column, gp in enumerate(self.coordinates):
            mean[:, column], variance[:, column] = gp.predict(x)
        mean = mean * self.output_std + self.output_mean
        if return_variance:
            return mean, variance * self.output_std**2
        return mean

    def noise_std(self) -> np.ndarray:
        """Learned noise standard deviation per output coordinate, in output units."""
        return np.array([np.sqrt(gp.hyperparameters.noise) for gp in self.coordinates]) * self.output_std

    def to_dict(self) -> dict:
        return {
            "restarts": self.restarts,
            "min_noise": self.min_noise,
            "noise": self.noise,
            "seed": self.seed,
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "hyperparameters": [item.to_dict() for item in self.hyperparameters],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> GpModel:
        model = cls(
            restarts=payload["restarts"], min_noise=payload["min_noise"], noise=payload["noise"], seed=payload["seed"]
        )
        return model.fit(
            np.asarray(payload["inputs"], dtype=np.float64),
            np.asarray(payload["outputs"], dtype=np.float64),
            [GpHyperparameters.from_dict(item) for item in payload["hyperparameters"]],
        )
