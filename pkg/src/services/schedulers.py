import math

from src.helpers.model import ConfigurationError
from src.models.training import SchedulerKind, SchedulerSpec


def kappa_at_epoch(spec: SchedulerSpec, epoch: int) -> float:
    """Signal scale for `epoch` in [0, total_epochs]."""
    if not 0 <= epoch <= spec.total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {spec.total_epochs}]")
    progress = epoch / spec.total_epochs
    if spec.kind == SchedulerKind.CONSTANT:
        return spec.kappa_init
    if spec.kind == SchedulerKind.LINEAR:
        return spec.kappa_init * (1.0 - progress)
    if spec.kind == SchedulerKind.EXPONENTIAL:
        return spec.kappa_init * math.exp(-spec.gamma * epoch)
    return spec.kappa_min + 0.5 * (spec.kappa_init - spec.kappa_min) * (1.0 + math.cos(math.pi * progress))


def learning_rate_at_epoch(base: float, epoch: int, total_epochs: int, kind: str = "cosine", minimum: float = 0.0) -> float:
    """Cosine annealing without restarts (or a constant rate)."""
    if kind == "constant":
        return base
    if not 0 <= epoch <= total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {total_epochs}]")
    return minimum + 0.5 * (base - minimum) * (1.0 + math.cos(math.pi * epoch / total_epochs))
