from collections import defaultdict
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from src.helpers.constants import (
    ENERGY_SUMMARY_CSV,
    ENERGY_TRACES_CSV,
    LAYER_STATS_CSV,
    METRICS_CSV,
)
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError
from src.models.diagnostics import (
    EnergySummaryRecord,
    EnergyTraceRecord,
    LayerStatRecord,
    MetricsRecord,
    PhaseTag,
)
from src.models.gradients import GradientEstimate
from src.models.state import NeuronState, PhaseResult
from src.repositories.records import RecordRepository

logger = Logger(__name__)


class DiagnosticsLog:
    """Append-only store for the per-run records that end up as CSV files."""

    def __init__(self):
        self.layer_stats: list[LayerStatRecord] = []
        self.energy_traces: list[EnergyTraceRecord] = []
        self.metrics: list[MetricsRecord] = []

    def record_layer_stats(
        self,
        state: NeuronState,
        grads: GradientEstimate | dict[str, np.ndarray],
        epoch: int,
        phase: PhaseTag | str,
        batch: int = 0,
    ) -> list[LayerStatRecord]:
        tensors = grads.tensors if isinstance(grads, GradientEstimate) else grads
        phase = PhaseTag(phase)
        added = []
        for index, layer in enumerate(state.layers):
            weight = tensors.get(f"layers.{index}.weight")
            added.append(
                LayerStatRecord(
                    epoch=epoch,
                    batch=batch,
                    layer=index,
                    phase=phase,
                    mean_activation=float(np.mean(layer, dtype=np.float64)),
                    grad_abs_sum=0.0 if weight is None else float(np.sum(np.abs(weight), dtype=np.float64)),
                )
            )
        self.layer_stats.extend(added)
        return added

    def record_energy_trace(self, result: PhaseResult, sample_id: int) -> list[EnergyTraceRecord]:
        phase = PhaseTag(result.phase)
        added = [
            EnergyTraceRecord(sample_id=sample_id, phase=phase, step=step + 1, energy=energy, residual=residual)
            for step, (energy, residual) in enumerate(zip(result.energies, result.residuals))
        ]
        self.energy_traces.extend(added)
        return added

    def record_metrics(self, record: MetricsRecord) -> None:
        self.metrics.append(record)

    def aggregate_energy_traces(self, phase: PhaseTag | str | None = None) -> list[EnergySummaryRecord]:
        """Mean and (population) std of the energy per step across samples.

        Shorter traces are padded with their final value, i.e. a converged
        sample is taken to stay at its steady state.
        """
        grouped: dict[PhaseTag, dict[int, list[tuple[int, float]]]] = defaultdict(lambda: defaultdict(list))
        for record in self.energy_traces:
            if phase is None or record.phase == PhaseTag(phase):
                grouped[record.phase][record.sample_id].append((record.step, record.energy))

        summary: list[EnergySummaryRecord] = []
        for tag in PhaseTag:
            if tag not in grouped:
                continue
            traces = [[energy for _, energy in sorted(steps)] for _, steps in sorted(grouped[tag].items())]
            length = max(len(trace) for trace in traces)
            table = np.array([trace + [trace[-1]] * (length - len(trace)) for trace in traces], dtype=np.float64)
            mean = table.mean(axis=0)
            std = table.std(axis=0)
            summary.extend(
                EnergySummaryRecord(phase=tag, step=step + 1, mean=float(mean[step]), std=float(std[step]), samples=len(traces))
                for step in range(length)
            )
        return summary

    def export(self, out_dir: str | Path, repository: RecordRepository | None = None) -> dict[str, Path]:
        """Write every non-empty log to its CSV file under `out_dir`."""
        repository = repository or RecordRepository()
        out_dir = Path(out_dir)
        written: dict[str, Path] = {}
        if self.metrics:
            written["metrics"] = export_csv(self.metrics, out_dir / METRICS_CSV, MetricsRecord, repository)
        if self.layer_stats:
            written["layer_stats"] = export_csv(self.layer_stats, out_dir / LAYER_STATS_CSV, LayerStatRecord, repository)
        if self.energy_traces:
            written["energy_traces"] = export_csv(
                self.energy_traces, out_dir / ENERGY_TRACES_CSV, EnergyTraceRecord, repository
            )
            written["energy_summary"] = export_csv(
                self.aggregate_energy_traces(), out_dir / ENERGY_SUMMARY_CSV, EnergySummaryRecord, repository
            )
        return written


def export_csv(
    log: list[BaseModel], path: str | Path, schema: type[BaseModel], repository: RecordRepository | None = None
) -> Path:
    repository = repository or RecordRepository()
    return repository.write(path, log, schema)


def read_csv(path: str | Path, schema: type[BaseModel], repository: RecordRepository | None = None) -> list[BaseModel]:
    repository = repository or RecordRepository()
    return repository.read(path, schema)


def layer_gradient_sums(records: list[LayerStatRecord], epoch: int, phase: PhaseTag = PhaseTag.FREE) -> dict[int, float]:
    """Mean gradient-magnitude sum per layer over the batches recorded in `epoch`."""
    sums: dict[int, list[float]] = defaultdict(list)
    for record in records:
        if record.epoch == epoch and record.phase == phase:
            sums[record.layer].append(record.grad_abs_sum)
    return {layer: float(np.mean(values)) for layer, values in sorted(sums.items())}


def vanishing_ratio(
    standard: list[LayerStatRecord],
    augmented: list[LayerStatRecord],
    layers: list[int],
    epoch: int,
) -> float:
    """Smallest augmented/standard gradient-sum ratio over `layers` at `epoch`.

    A ratio of 10 means the standard run's gradients in the weakest of those
    layers are ten times smaller than under augmentation.
    """
    if not layers:
        raise ConfigurationError("the vanishing-gradient ratio needs at least one layer")
    std_sums = layer_gradient_sums(standard, epoch)
    aug_sums = layer_gradient_sums(augmented, epoch)
    missing = [i for i in layers if i not in std_sums or i not in aug_sums]
    if missing:
        raise ConfigurationError(f"no layer statistics for layers {missing} at epoch {epoch}")
    ratios = []
    for layer in layers:
        if std_sums[layer] == 0.0:
            ratios.append(float("inf") if aug_sums[layer] > 0.0 else 1.0)
        else:
            ratios.append(aug_sums[layer] / std_sums[layer])
    return float(min(ratios))
