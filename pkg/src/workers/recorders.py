from pathlib import Path
from typing import Callable

from src.helpers.constants import (
    BATCH_COMPLETED_EVENT,
    CHECKPOINT_SAVED_EVENT,
    EPOCH_COMPLETED_EVENT,
    PHASE_COMPLETED_EVENT,
)
from src.helpers.events import Events
from src.helpers.logger import Logger
from src.models.diagnostics import MetricsRecord, PhaseTag
from src.models.gradients import GradientEstimate
from src.models.state import PhaseResult
from src.services.diagnostics import DiagnosticsLog
from src.services.estimators import EPPhases

logger = Logger(__name__)


def on_batch_completed(log: DiagnosticsLog, every: int):
    """Layer statistics for the free and both nudged phases every `every` batches.

    Each phase is recorded with the gradient it produced: the applied estimate
    for the free phase, the one-sided estimate for each nudged phase.
    """

    def record(
        epoch: int,
        batch: int,
        phases: EPPhases,
        phase_gradients: Callable[[], dict[PhaseTag, GradientEstimate]],
        **_,
    ):
        if batch % every:
            return
        grads = phase_gradients()
        tagged = ((PhaseTag.FREE, phases.free), (PhaseTag.NUDGE_POS, phases.plus), (PhaseTag.NUDGE_NEG, phases.minus))
        for tag, result in tagged:
            if result is not None and tag in grads:
                log.record_layer_stats(result.state, grads[tag], epoch, tag, batch)

    return record


def on_phase_completed(log: DiagnosticsLog):
    def record(result: PhaseResult, sample_id: int):
        log.record_energy_trace(result, sample_id)

    return record


def on_epoch_completed(log: DiagnosticsLog):
    def record(record: MetricsRecord):
        log.record_metrics(record)
        logger.debug("Metrics recorded for epoch %d", record.epoch)

    return record


def on_checkpoint_saved(manifest_files: dict[str, str]):
    def record(path: Path, epoch: int):
        manifest_files[path.name] = str(path)
        logger.debug("Checkpoint %s saved after epoch %d", path, epoch)

    return record


def register_recorders(
    events: Events,
    log: DiagnosticsLog,
    layer_stats_every: int,
    manifest_files: dict[str, str] | None = None,
) -> None:
    events.on(BATCH_COMPLETED_EVENT, on_batch_completed(log, layer_stats_every))
    events.on(PHASE_COMPLETED_EVENT, on_phase_completed(log))
    events.on(EPOCH_COMPLETED_EVENT, on_epoch_completed(log))
    if manifest_files is not None:
        events.on(CHECKPOINT_SAVED_EVENT, on_checkpoint_saved(manifest_files))
