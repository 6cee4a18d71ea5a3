from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.models.network import Activation, NetworkSpec
from src.models.tensors import ArrayModel


class AugMode(str, Enum):
    NONE = "none"
    LE = "le"
    KD = "kd"
    KDW = "kdw"

    @classmethod
    def parse(cls, value: "str | AugMode") -> "AugMode":
        if isinstance(value, AugMode):
            return value
        value = value.strip().lower()
        return cls.NONE if value in ("std", "standard", "") else cls(value)


class SchedulerKind(str, Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"
    COSINE = "cosine"

    @classmethod
    def parse(cls, value: "str | SchedulerKind") -> "SchedulerKind":
        if isinstance(value, SchedulerKind):
            return value
        value = value.strip().lower()
        return cls.EXPONENTIAL if value == "exp" else cls(value)


class SchedulerSpec(BaseModel):
    kind: SchedulerKind = SchedulerKind.CONSTANT
    kappa_init: float = 0.65
    kappa_min: float = 0.0
    gamma: float = 0.02
    total_epochs: int = 250

    @field_validator("kind", mode="before")
    @classmethod
    def parse_kind(cls, value: str | SchedulerKind) -> SchedulerKind:
        return SchedulerKind.parse(value)

    @model_validator(mode="after")
    def check_ranges(self) -> "SchedulerSpec":
        if not self.kappa_init >= self.kappa_min >= 0.0:
            raise ValueError("scheduler needs kappa_init >= kappa_min >= 0")
        if self.gamma <= 0.0:
            raise ValueError("scheduler gamma must be positive")
        if self.total_epochs < 1:
            raise ValueError("scheduler total_epochs must be >= 1")
        return self


class TargetBundle(ArrayModel):
    """Targets for one batch: labels, distillation logits and softening."""

    labels: np.ndarray
    num_classes: int
    teacher_logits: dict[int, np.ndarray] = Field(default_factory=dict)
    tau: float = 4.0
    kappa: float = 0.0
    scale_by_temperature: bool = True

    @model_validator(mode="after")
    def check_ranges(self) -> "TargetBundle":
        if self.tau <= 0.0:
            raise ValueError("temperature tau must be positive")
        if self.kappa < 0.0:
            raise ValueError("signal scale kappa must be non-negative")
        if self.labels.ndim != 1:
            raise ValueError("labels must be a vector of class indices")
        return self

    @property
    def batch_size(self) -> int:
        return int(self.labels.shape[0])

    def one_hot(self, dtype: np.dtype) -> np.ndarray:
        encoded = np.zeros((self.labels.shape[0], self.num_classes), dtype=dtype)
        encoded[np.arange(self.labels.shape[0]), self.labels] = 1.0
        return encoded

    def rows(self, index: np.ndarray) -> "TargetBundle":
        return self.model_copy(
            update={
                "labels": self.labels[index],
                "teacher_logits": {k: v[index] for k, v in self.teacher_logits.items()},
            }
        )


def _parse_rates(value: str | list) -> list[tuple[float, int]]:
    if isinstance(value, str):
        table: list[tuple[float, int]] = []
        for chunk in value.replace("[", "").replace("]", "").split(","):
            chunk = chunk.strip().replace("×", "x").replace("*", "x")
            if not chunk:
                continue
            rate, _, span = chunk.partition("x")
            table.append((float(rate), int(span) if span else 1))
        return table
    return [tuple(item) for item in value]


class TrainConfig(BaseModel):
    """Run configuration; field names double as keys of the run-config file."""

    # architecture
    architecture: str = "conv3-16,maxpool,conv3-32,maxpool,fc-10"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    conv_activation: Activation = Activation.HARD_SIGMOID
    linear_activation: Activation = Activation.HARD_SIGMOID
    use_bias: bool = True

    # augmentation
    mode: AugMode = AugMode.NONE
    upsilon: list[int] = []
    kappa: float = 0.65
    kappa_scheduler: SchedulerKind = SchedulerKind.CONSTANT
    kappa_min: float = 0.0
    kappa_gamma: float = 0.02
    kappa_epochs: int | None = None
    tau: float = 4.0
    scale_by_temperature: bool = True
    projection_trainable: bool = True
    aux_update: Literal["three_phase", "two_phase"] = "three_phase"

    # dynamics
    beta: float = 0.25
    t_free: int = 250
    t_nudge: int = 50
    tol: float = 1e-4
    tol_energy: float = 1e-3
    state_init: Literal["zeros", "uniform"] = "zeros"
    parallel_nudge: bool = False

    # optimisation
    learning_rates: list[tuple[float, int]] = [(0.03, 3)]
    lr_scheduler: Literal["cosine", "constant"] = "cosine"
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 128
    epochs: int = 250
    weight_scale: float = 1.0
    bias_init: float | None = None
    seed: int = 0
    precision: Literal["f32", "f64"] = "f32"

    # data
    dataset: Literal["mnist", "cifar10", "cifar100", "blobs", "xor"] = "mnist"
    train_subset: int | None = None
    test_subset: int | None = None
    synth_samples: int = 256
    synth_separation: float = 4.0
    normalize: bool = False
    channel_mean: list[float] | None = None
    channel_std: list[float] | None = None
    crop_pad: int = 0
    flip_p: float = 0.0
    pad_mode: Literal["reflect", "zero"] = "reflect"
    teacher_logits: str | None = None
    test_teacher_logits: str | None = None
    teacher_taps: dict[int, int] = {}

    # recording
    checkpoint_every: int = 1
    layer_stats_every: int = 50
    energy_trace_samples: int = 100

    @field_validator("mode", mode="before")
    @classmethod
    def parse_mode(cls, value: str | AugMode) -> AugMode:
        return AugMode.parse(value)

    @field_validator("kappa_scheduler", mode="before")
    @classmethod
    def parse_scheduler(cls, value: str | SchedulerKind) -> SchedulerKind:
        return SchedulerKind.parse(value)

    @field_validator("upsilon", mode="before")
    @classmethod
    def split_upsilon(cls, value: str | list[int] | None) -> list[int]:
        if value is None or value == "":
            return []
        if isinstance(value, str):
            return [int(item) for item in value.split(",") if item.strip()]
        return list(value)

    @field_validator("input_shape", mode="before")
    @classmethod
    def split_shape(cls, value: str | tuple | list) -> tuple:
        if isinstance(value, str):
            return tuple(int(item) for item in value.lower().replace(",", "x").split("x") if item.strip())
        return tuple(value)

    @field_validator("channel_mean", "channel_std", mode="before")
    @classmethod
    def split_floats(cls, value: str | list[float] | None) -> list[float] | None:
        if value is None or value == "":
            return None
        if isinstance(value, str):
            return [float(item) for item in value.split(",") if item.strip()]
        return list(value)

    @field_validator("teacher_taps", mode="before")
    @classmethod
    def parse_taps(cls, value: str | dict | None) -> dict[int, int]:
        if value is None or value == "":
            return {}
        if isinstance(value, str):
            pairs = [item.split(":") for item in value.split(",") if item.strip()]
            return {int(student): int(teacher) for student, teacher in pairs}
        return dict(value)

    @field_validator("learning_rates", mode="before")
    @classmethod
    def parse_rates(cls, value: str | list) -> list[tuple[float, int]]:
        return _parse_rates(value)

    @field_validator("train_subset", "test_subset", "kappa_epochs", "teacher_logits", "test_teacher_logits", "bias_init", mode="before")
    @classmethod
    def empty_is_none(cls, value):
        return None if value == "" else value

    @model_validator(mode="after")
    def check_ranges(self) -> "TrainConfig":
        if self.beta == 0.0:
            raise ValueError("beta must be non-zero for nudged training")
        if self.t_free < 1 or self.t_nudge < 1:
            raise ValueError("t_free and t_nudge must be >= 1")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.kappa < 0.0:
            raise ValueError("kappa must be non-negative")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ValueError("flip_p must lie in [0, 1]")
        if self.crop_pad < 0:
            raise ValueError("crop_pad must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        spec = self.network_spec()
        spans = sum(span for _, span in self.learning_rates)
        if spans != spec.n_total:
            raise ValueError(
                f"learning-rate spans sum to {spans} but the network has {spec.n_total} layers"
            )
        if self.mode == AugMode.NONE and self.upsilon and self.kappa > 0.0:
            raise ValueError("upsilon layers need an augmentation mode (le, kd or kdw)")
        return self

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec.from_architecture(
            self.architecture,
            self.input_shape,
            upsilon=self.upsilon,
            conv_activation=self.conv_activation,
            linear_activation=self.linear_activation,
            use_bias=self.use_bias,
        )

    def scheduler_spec(self) -> SchedulerSpec:
        kind = self.kappa_scheduler
        return SchedulerSpec(
            kind=kind,
            kappa_init=self.kappa,
            kappa_min=min(self.kappa_min, self.kappa),
            gamma=self.kappa_gamma,
            total_epochs=self.kappa_epochs or self.epochs,
        )

    def layer_learning_rates(self) -> list[float]:
        rates: list[float] = []
        for rate, span in self.learning_rates:
            rates.extend([rate] * span)
        return rates
