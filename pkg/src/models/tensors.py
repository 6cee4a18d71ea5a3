from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict

# Tensors are plain numpy arrays: row-major, N,C,H,W axis order, float32 by
# default and float64 when a run asks for oracle precision.
Tensor = np.ndarray


class ArrayModel(BaseModel):
    """Base for domain types that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class PoolIndexCache(ArrayModel):
    """Argmax positions recorded by one max-pool call.

    `indices[n, c, i, j]` is the flat (row-major) position inside the H×W
    plane of channel c that won window (i, j).
    """

    indices: np.ndarray
    input_shape: tuple[int, int, int, int]
    window: int
    stride: int

    @property
    def output_shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.indices.shape)

    def describe(self) -> dict[str, Any]:
        return {
            "input_shape": self.input_shape,
            "output_shape": self.output_shape,
            "window": self.window,
            "stride": self.stride,
        }
