import numpy as np

from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, DivergenceError
from src.models.gradients import GradientEstimate
from src.models.state import WeightSet
from src.models.training import TrainConfig
from src.services.schedulers import learning_rate_at_epoch

logger = Logger(__name__)


def layer_of(name: str) -> int:
    """Layer index a parameter name belongs to (`layers.3.bias` -> 3, `mappings.1` -> 1)."""
    parts = name.split(".")
    return int(parts[1])


class SGD:
    """SGD with momentum, L2 weight decay and a layer-wise learning-rate table.

    g = grad + weight_decay * w;  v = momentum * v + g;  w -= lr * v.
    Auxiliary readouts use the rate of the layer they read. Momentum buffers
    are created at zero on first use.
    """

    def __init__(
        self,
        rates: list[float],
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        scheduler: str = "cosine",
        lr_min: float = 0.0,
        total_epochs: int = 1,
    ):
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if weight_decay < 0.0:
            raise ConfigurationError("weight_decay must be non-negative")
        self.rates = list(rates)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scheduler = scheduler
        self.lr_min = lr_min
        self.total_epochs = total_epochs
        self.buffers: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, config: TrainConfig) -> "SGD":
        return cls(
            rates=config.layer_learning_rates(),
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            scheduler=config.lr_scheduler,
            lr_min=config.lr_min,
            total_epochs=config.epochs,
        )

    def learning_rate(self, layer: int, epoch: int) -> float:
        if not 0 <= layer < len(self.rates):
            raise ConfigurationError(f"no learning rate for layer {layer}")
        return learning_rate_at_epoch(
            self.rates[layer], epoch, self.total_epochs, self.scheduler, min(self.lr_min, self.rates[layer])
        )

    def step(self, weights: WeightSet, grad: GradientEstimate, epoch: int) -> WeightSet:
        grad.check_against(weights)
        named = weights.named()
        for name, g in grad.tensors.items():
            w = named[name]
            g = g.astype(w.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * w
            buffer = self.buffers.get(name)
            if buffer is None:
                buffer = np.zeros_like(w)
            buffer = self.momentum * buffer + g
            self.buffers[name] = buffer
            named[name] = w - self.learning_rate(layer_of(name), epoch) * buffer

        updated = WeightSet.from_named(weights, named)
        if not updated.is_finite():
            logger.error("Non-finite weights after the epoch %d update", epoch)
            raise DivergenceError("update", epoch)
        return updated

    def state(self) -> dict[str, np.ndarray]:
        return {f"momentum.{name}": buffer for name, buffer in self.buffers.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.buffers = {
            name.removeprefix("momentum."): value for name, value in tensors.items() if name.startswith("momentum.")
        }
