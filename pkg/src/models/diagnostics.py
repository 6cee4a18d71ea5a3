import math
from enum import Enum

from pydantic import BaseModel, field_validator


class PhaseTag(str, Enum):
    FREE = "free"
    NUDGE_POS = "nudge+"
    NUDGE_NEG = "nudge-"


class LayerStatRecord(BaseModel):
    epoch: int
    batch: int
    layer: int
    phase: PhaseTag
    mean_activation: float
    grad_abs_sum: float

    @field_validator("mean_activation", "grad_abs_sum")
    @classmethod
    def finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("layer statistics must be finite")
        return value


class EnergyTraceRecord(BaseModel):
    sample_id: int
    phase: PhaseTag
    step: int
    energy: float
    residual: float


class EnergySummaryRecord(BaseModel):
    phase: PhaseTag
    step: int
    mean: float
    std: float
    samples: int


class MetricsRecord(BaseModel):
    epoch: int
    kappa: float
    learning_rate: float
    train_loss: float
    train_accuracy: float
    test_loss: float | None = None
    test_accuracy: float | None = None
    converged_fraction: float
    mean_free_steps: float
    mean_nudge_steps: float
    retained_snapshots: int


class ComparisonRecord(BaseModel):
    reference: str
    candidate: str
    beta: float | None
    tensor: str
    cosine: float
    relative_error: float
    sign_agreement: float


class BetaSweepRecord(BaseModel):
    beta: float
    error_to_fd: float
    cosine_to_fd: float
    cosine_to_bptt: float | None = None


# CSV column order follows field declaration order of each record type.
CSV_SCHEMAS: dict[str, type[BaseModel]] = {
    "metrics": MetricsRecord,
    "layer_stats": LayerStatRecord,
    "energy_traces": EnergyTraceRecord,
    "energy_summary": EnergySummaryRecord,
    "comparisons": ComparisonRecord,
    "beta_sweep": BetaSweepRecord,
}
