from collections.abc import Iterator

import numpy as np
from pydantic import Field, model_validator

from src.helpers.model import DimensionError
from src.models.network import NetworkSpec
from src.models.tensors import ArrayModel, PoolIndexCache


class NeuronState(ArrayModel):
    """States of every non-input layer at one time step."""

    layers: list[np.ndarray]
    caches: dict[int, PoolIndexCache] = Field(default_factory=dict)
    t: int = 0

    @property
    def batch_size(self) -> int:
        return int(self.layers[0].shape[0])

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1]

    def copy(self) -> "NeuronState":
        return NeuronState(
            layers=[layer.copy() for layer in self.layers],
            caches=dict(self.caches),
            t=self.t,
        )

    def max_abs_diff(self, other: "NeuronState") -> float:
        return max(
            float(np.max(np.abs(a - b))) if a.size else 0.0
            for a, b in zip(self.layers, other.layers)
        )

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(layer))) for layer in self.layers)

    def check_shapes(self, spec: NetworkSpec) -> None:
        if len(self.layers) != spec.n_total:
            raise DimensionError("NeuronState", "layers", spec.n_total, len(self.layers))
        batch = self.batch_size
        for index, layer in enumerate(self.layers):
            expected = (batch, *spec.state_shape(index))
            if tuple(layer.shape) != expected:
                raise DimensionError("NeuronState", f"layer {index}", expected, tuple(layer.shape))

    def num_elements(self) -> int:
        return sum(int(layer.size) for layer in self.layers)


class WeightSet(ArrayModel):
    """Layer weights and biases plus the auxiliary readouts of augmented modes.

    `projections[i]` is B_i (classes x flattened state i) and `mappings[i]` is
    w_map_i (teacher logits x student logit view of layer i).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    projections: dict[int, np.ndarray] = Field(default_factory=dict)
    mappings: dict[int, np.ndarray] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_lengths(self) -> "WeightSet":
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must have one entry per layer")
        return self

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def named(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for index, weight in enumerate(self.weights):
            params[f"layers.{index}.weight"] = weight
            bias = self.biases[index]
            if bias is not None:
                params[f"layers.{index}.bias"] = bias
        for index, matrix in sorted(self.projections.items()):
            params[f"projections.{index}"] = matrix
        for index, matrix in sorted(self.mappings.items()):
            params[f"mappings.{index}"] = matrix
        return params

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.named().items())

    def num_parameters(self) -> int:
        return sum(int(value.size) for value in self.named().values())

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(value))) for value in self.named().values())

    def copy(self) -> "WeightSet":
        return WeightSet.from_named(self, {name: value.copy() for name, value in self.items()})

    def with_parameter(self, name: str, value: np.ndarray) -> "WeightSet":
        named = self.named()
        if name not in named:
            raise KeyError(name)
        if named[name].shape != value.shape:
            raise DimensionError("WeightSet", name, named[name].shape, value.shape)
        named[name] = value
        return WeightSet.from_named(self, named)

    def check_shapes(self, spec: NetworkSpec) -> None:
        if len(self.weights) != spec.n_total:
            raise DimensionError("WeightSet", "layers", spec.n_total, len(self.weights))
        for index, weight in enumerate(self.weights):
            if tuple(weight.shape) != spec.weight_shape(index):
                raise DimensionError("WeightSet", f"layers.{index}.weight", spec.weight_shape(index), weight.shape)
            bias = self.biases[index]
            if spec.use_bias and (bias is None or bias.shape != (spec.layers[index].out,)):
                raise DimensionError(
                    "WeightSet", f"layers.{index}.bias", (spec.layers[index].out,), None if bias is None else bias.shape
                )

    @staticmethod
    def from_named(template: "WeightSet", named: dict[str, np.ndarray]) -> "WeightSet":
        weights = [named[f"layers.{i}.weight"] for i in range(len(template.weights))]
        biases = [named.get(f"layers.{i}.bias") for i in range(len(template.weights))]
        projections = {i: named[f"projections.{i}"] for i in template.projections}
        mappings = {i: named[f"mappings.{i}"] for i in template.mappings}
        return WeightSet(weights=weights, biases=biases, projections=projections, mappings=mappings)


class PhaseResult(ArrayModel):
    state: NeuronState
    energies: list[float]
    residuals: list[float]
    steps: int
    converged: bool
    beta: float = 0.0
    phase: str = "free"

    @model_validator(mode="after")
    def check_trace(self) -> "PhaseResult":
        if len(self.residuals) != self.steps:
            raise ValueError("one residual per executed step is required")
        return self

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("inf")
