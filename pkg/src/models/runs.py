from datetime import datetime, timezone
from typing import Any

import numpy as np
from pydantic import BaseModel, Field

from src.models.tensors import ArrayModel


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class RunManifest(BaseModel):
    command: str
    config: dict[str, Any]
    seed: int
    code_version: str
    network_digest: str | None = None
    started_at: datetime = Field(default_factory=utc_now)
    ended_at: datetime | None = None
    out_dir: str
    files: dict[str, str] = Field(default_factory=dict)
    exit_code: int | None = None
    summary: dict[str, Any] = Field(default_factory=dict)

    def finish(self, exit_code: int) -> None:
        self.exit_code = exit_code
        self.ended_at = utc_now()


class Checkpoint(ArrayModel):
    """Weights (and optimizer buffers) saved at the end of an epoch."""

    spec_digest: str
    epoch: int
    seed: int
    tensors: dict[str, np.ndarray]


class TeacherLogits(ArrayModel):
    """Per-sample logits of a reference network, keyed by student layer (-1 = output)."""

    dataset_digest: str
    layers: dict[int, np.ndarray]

    @property
    def num_samples(self) -> int:
        return next(iter(self.layers.values())).shape[0] if self.layers else 0

    def dims(self) -> dict[int, int]:
        return {key: int(value.shape[1]) for key, value in self.layers.items()}
