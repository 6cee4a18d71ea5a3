import os
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from src.models.network import NetworkSpec
from src.models.training import AugMode, TargetBundle
from src.services.energy import CRNN
from src.services.estimators import EPConfig

F64 = np.dtype("float64")


def build_net(
    architecture: str = "conv3-2,maxpool,fc-3",
    input_shape: tuple[int, int, int] = (1, 4, 4),
    upsilon: tuple[int, ...] = (),
    mode: AugMode = AugMode.NONE,
    seed: int = 0,
    batch: int = 4,
    scale: float = 0.5,
    bias: float | None = 0.5,
    kappa: float = 0.0,
    teacher: bool = False,
    mapping_init: str = "kaiming",
    x_scale: float = 1.0,
) -> SimpleNamespace:
    """A small f64 network with a random batch and matching targets.

    With `bias` set every bias starts at that value, which keeps most states
    inside the open interval of the hard sigmoid.
    """
    spec = NetworkSpec.from_architecture(architecture, input_shape, upsilon=list(upsilon))
    model = CRNN(spec)
    rng = np.random.default_rng(seed)
    teacher_logits: dict[int, np.ndarray] = {}
    teacher_dims: dict[int, int] = {}
    if teacher:
        for index in upsilon:
            dim = spec.kd_size(index)
            teacher_logits[index] = rng.normal(size=(batch, dim))
            teacher_dims[index] = dim
    weights = model.init_weights(
        rng, F64, scale=scale, mode=mode, teacher_dims=teacher_dims, mapping_init=mapping_init, bias=bias
    )
    x = x_scale * rng.normal(size=(batch, *input_shape))
    labels = rng.integers(0, spec.num_classes, size=batch)
    targets = TargetBundle(
        labels=labels, num_classes=spec.num_classes, teacher_logits=teacher_logits, kappa=kappa
    )
    return SimpleNamespace(spec=spec, model=model, weights=weights, x=x, labels=labels, targets=targets)


def ep_settings(
    beta: float = 0.01,
    kappa: float = 0.0,
    mode: AugMode = AugMode.NONE,
    steps: int = 200,
    tol: float = 0.0,
    **extra,
) -> EPConfig:
    return EPConfig(beta=beta, kappa=kappa, mode=mode, t_free=steps, t_nudge=steps, tol=tol, **extra)


@pytest.fixture
def tiny():
    return build_net()


@pytest.fixture
def data_dir() -> Path:
    directory = os.environ.get("CRNN_DATA_DIR")
    if not directory:
        pytest.skip("CRNN_DATA_DIR is not set")
    return Path(directory)


@pytest.fixture
def cifar_dir() -> Path:
    directory = os.environ.get("CRNN_CIFAR_DIR")
    if not directory:
        pytest.skip("CRNN_CIFAR_DIR is not set")
    return Path(directory)


TINY_CONFIG = """\
dataset=blobs
input_shape=1,4,4
architecture=conv3-2,maxpool,fc-3
synth_samples=24
synth_separation=4.0
beta=0.05
t_free=60
t_nudge=60
tol=1e-10
weight_scale=0.5
learning_rates=0.05x2
lr_scheduler=constant
momentum=0.5
weight_decay=0.0
batch_size=8
epochs=2
layer_stats_every=1
energy_trace_samples=3
precision=f64
seed=7
"""


@pytest.fixture
def tiny_config(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.env"
    path.write_text(TINY_CONFIG)
    return path


def smooth_net(**overrides) -> SimpleNamespace:
    """Dense network whose states stay well inside (0, 1), so the dynamics are free of kinks."""
    values = dict(architecture="fc-6,fc-3", input_shape=(1, 2, 2), scale=0.25, bias=0.5, x_scale=0.5)
    values.update(overrides)
    return build_net(**values)


@pytest.fixture
def smooth():
    return smooth_net()
