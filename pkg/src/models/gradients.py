from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from src.helpers.model import DimensionError
from src.models.state import WeightSet
from src.models.tensors import ArrayModel


class Estimator(str, Enum):
    EP2_POS = "ep2+"
    EP2_NEG = "ep2-"
    EP3 = "ep3"
    BPTT = "bptt"
    FD = "fd"


class GradientEstimate(ArrayModel):
    """Per-parameter gradients of the batch-mean total loss.

    `metadata` carries provenance details: convergence warnings, retained
    snapshot counts and, for sampled finite differences, the flat entries
    that were actually measured (`entries`).
    """

    tensors: dict[str, np.ndarray]
    estimator: Estimator
    beta: float | None = None
    metadata: dict[str, Any] = Field(default_factory=dict)

    def check_against(self, weights: WeightSet) -> None:
        named = weights.named()
        for name, tensor in self.tensors.items():
            if name not in named:
                raise DimensionError("GradientEstimate", name, "a WeightSet parameter", "unknown")
            if tensor.shape != named[name].shape:
                raise DimensionError("GradientEstimate", name, named[name].shape, tensor.shape)

    def layer_sums(self) -> dict[int, float]:
        """Sum of |gradient| of each layer's weight tensor."""
        sums: dict[int, float] = {}
        for name, tensor in self.tensors.items():
            if name.startswith("layers.") and name.endswith(".weight"):
                sums[int(name.split(".")[1])] = float(np.sum(np.abs(tensor)))
        return sums

    def entries(self, name: str) -> np.ndarray | None:
        sampled = self.metadata.get("entries", {})
        return None if name not in sampled else np.asarray(sampled[name], dtype=np.int64)

    def scaled(self, factor: float, estimator: Estimator | None = None) -> "GradientEstimate":
        return GradientEstimate(
            tensors={name: tensor * factor for name, tensor in self.tensors.items()},
            estimator=estimator or self.estimator,
            beta=self.beta,
            metadata=dict(self.metadata),
        )


class TensorComparison(BaseModel):
    name: str
    cosine: float
    relative_error: float
    sign_agreement: float
    entries: int


class ComparisonReport(BaseModel):
    reference: str
    candidate: str
    per_tensor: list[TensorComparison]
    cosine: float
    relative_error: float
    sign_agreement: float

    def tensor(self, name: str) -> TensorComparison:
        for item in self.per_tensor:
            if item.name == name:
                return item
        raise KeyError(name)

    def min_layer_cosine(self) -> float:
        values = [t.cosine for t in self.per_tensor if t.name.endswith(".weight")]
        return min(values) if values else self.cosine
