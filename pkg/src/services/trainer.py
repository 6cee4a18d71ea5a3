import time
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from src.helpers.constants import (
    BATCH_COMPLETED_EVENT,
    BEST_CHECKPOINT,
    CHECKPOINT_DIR,
    CHECKPOINT_SAVED_EVENT,
    EPOCH_COMPLETED_EVENT,
    LAST_CHECKPOINT,
    PHASE_COMPLETED_EVENT,
)
from src.helpers.events import Events
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError, DigestMismatchError, DivergenceError
from src.models.datasets import Dataset
from src.models.diagnostics import MetricsRecord, PhaseTag
from src.models.gradients import ComparisonReport, GradientEstimate
from src.models.runs import Checkpoint, TeacherLogits
from src.models.state import NeuronState, WeightSet
from src.models.tensors import ArrayModel, Tensor
from src.models.training import AugMode, TargetBundle, TrainConfig
from src.repositories.checkpoints import CheckpointRepository
from src.repositories.datasets import iterate_batches
from src.services.energy import CRNN
from src.services.estimators import (
    EPConfig,
    EPPhases,
    SnapshotLedger,
    effective_kappa,
    ep_gradient_three_phase,
    ep_phases,
    run_free_phase,
    three_phase_estimate,
    two_phase_estimate,
)
from src.services.losses import output_loss, signal_active
from src.services.optimizer import SGD
from src.services.oracle import compare, fd_gradient
from src.services.schedulers import kappa_at_epoch

logger = Logger(__name__)

RNG_STREAMS = ("weights", "aux", "order", "state", "augment")


def update_weights(weights: WeightSet, grad: GradientEstimate, optimizer: SGD, epoch: int) -> WeightSet:
    """SGD step on the layer weights and biases carried by `grad`."""
    layers = {name: value for name, value in grad.tensors.items() if name.startswith("layers.")}
    return optimizer.step(weights, grad.model_copy(update={"tensors": layers}), epoch)


def update_aux_weights(
    weights: WeightSet, grad: GradientEstimate, optimizer: SGD, epoch: int, config: TrainConfig
) -> WeightSet:
    """SGD step on B_i (le) or w_map (kdw); a no-op when `grad` carries none."""
    aux = {
        name: value
        for name, value in grad.tensors.items()
        if name.startswith("mappings.") or (name.startswith("projections.") and config.projection_trainable)
    }
    if aux and config.mode not in (AugMode.LE, AugMode.KDW):
        raise ConfigurationError(f"auxiliary gradients present but mode is '{config.mode.value}'")
    if not aux:
        return weights
    return optimizer.step(weights, grad.model_copy(update={"tensors": aux}), epoch)


def _norm(tensors: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(t.astype(np.float64) ** 2) for t in tensors.values())))


class DecompositionReport(BaseModel):
    beta: float
    kappa: float
    comparison: ComparisonReport
    ep_component_norm: float
    aug_component_norm: float

    @property
    def cosine(self) -> float:
        return self.comparison.cosine


def augmented_gradient_decomposition_check(
    model: CRNN,
    x: Tensor,
    targets: TargetBundle,
    weights: WeightSet,
    settings: EPConfig,
    eps: float = 1e-4,
    entries: int | None = None,
    init: NeuronState | None = None,
) -> DecompositionReport:
    """Compare EP3 with the finite-difference gradient of L_EP + kappa * sum L_Aug.

    The two loss parts are differenced separately, so the report also shows the
    size of the augmentation component on its own.
    """
    free = run_free_phase(model, x, weights, settings, init=init)
    ep3 = ep_gradient_three_phase(model, x, targets, weights, settings, free=free)
    fd_ep = fd_gradient(model, x, targets, weights, settings, eps, objective="ep", entries=entries, init=init)
    fd_aug = fd_gradient(model, x, targets, weights, settings, eps, objective="aug", entries=entries, init=init)
    kappa = effective_kappa(model, settings)
    total = fd_ep.model_copy(
        update={"tensors": {name: fd_ep.tensors[name] + kappa * fd_aug.tensors[name] for name in fd_ep.tensors}}
    )
    return DecompositionReport(
        beta=settings.beta,
        kappa=kappa,
        comparison=compare(total, ep3),
        ep_component_norm=_norm(fd_ep.tensors),
        aug_component_norm=kappa * _norm(fd_aug.tensors),
    )


class EvaluationResult(BaseModel):
    loss: float
    accuracy: float
    converged_fraction: float
    samples: int


class TrainingResult(ArrayModel):
    weights: WeightSet
    metrics: list[MetricsRecord]
    best_accuracy: float
    best_epoch: int
    retained_snapshots: int


class EPTrainer:
    """Three-phase EP training loop.

    Randomness comes from independent streams spawned from the run seed, so
    runs that differ only in their augmentation settings share weight
    initialisation, batch order and state initialisation.
    """

    def __init__(
        self,
        config: TrainConfig,
        events: Events | None = None,
        checkpoints: CheckpointRepository | None = None,
        out_dir: str | Path | None = None,
        teacher_dims: dict[int, int] | None = None,
        weights: WeightSet | None = None,
        mapping_init: str = "kaiming",
    ):
        self.config = config
        self.spec = config.network_spec()
        self.model = CRNN(self.spec)
        self.dtype = np.dtype("float64" if config.precision == "f64" else "float32")
        self.events = events or Events()
        self.checkpoints = checkpoints
        self.out_dir = Path(out_dir) if out_dir is not None else None

        streams = np.random.SeedSequence(config.seed).spawn(len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(seq) for name, seq in zip(RNG_STREAMS, streams)}
        self.weights = weights or self.model.init_weights(
            self.rngs["weights"],
            self.dtype,
            scale=config.weight_scale,
            mode=config.mode,
            aux_rng=self.rngs["aux"],
            teacher_dims=teacher_dims,
            mapping_init=mapping_init,
            bias=config.bias_init,
        )
        self.weights.check_shapes(self.spec)
        self.optimizer = SGD.from_config(config)
        self.ledger = SnapshotLedger()
        self.start_epoch = 0

    def kappa_for_epoch(self, epoch: int) -> float:
        if not signal_active(self.config.mode, self.spec.upsilon, self.config.kappa):
            return 0.0
        spec = self.config.scheduler_spec()
        return kappa_at_epoch(spec, min(epoch, spec.total_epochs))

    def settings_for_epoch(self, epoch: int) -> EPConfig:
        return EPConfig.from_config(self.config, kappa=self.kappa_for_epoch(epoch))

    def targets_for(
        self, index: np.ndarray, labels: np.ndarray, kappa: float, teacher: TeacherLogits | None
    ) -> TargetBundle:
        logits: dict[int, np.ndarray] = {}
        if teacher is not None:
            logits = {key: teacher.layers[key][index] for key in self.spec.upsilon if key in teacher.layers}
        return TargetBundle(
            labels=labels,
            num_classes=self.spec.num_classes,
            teacher_logits=logits,
            tau=self.config.tau,
            kappa=kappa,
            scale_by_temperature=self.config.scale_by_temperature,
        )

    def train_batch(self, x: Tensor, targets: TargetBundle, epoch: int, batch: int) -> tuple[GradientEstimate, EPPhases]:
        settings = self.settings_for_epoch(epoch)
        self.ledger.reset()
        phases = ep_phases(
            self.model, x, targets, self.weights, settings, rng=self.rngs["state"], ledger=self.ledger
        )
        before = self.weights
        estimate = three_phase_estimate(
            self.model, x, targets, before, phases, settings.mode, settings.aux_update
        )
        self.weights = update_weights(before, estimate, self.optimizer, epoch)
        self.weights = update_aux_weights(self.weights, estimate, self.optimizer, epoch, self.config)

        def phase_gradients() -> dict[PhaseTag, GradientEstimate]:
            """The applied estimate for the free phase, the one-sided estimate of each nudged phase."""
            return {
                PhaseTag.FREE: estimate,
                PhaseTag.NUDGE_POS: two_phase_estimate(self.model, x, targets, before, phases, 1, settings.mode),
                PhaseTag.NUDGE_NEG: two_phase_estimate(self.model, x, targets, before, phases, -1, settings.mode),
            }

        self.events.emit(
            BATCH_COMPLETED_EVENT,
            epoch=epoch,
            batch=batch,
            phases=phases,
            estimate=estimate,
            phase_gradients=phase_gradients,
        )
        return estimate, phases

    def train(
        self,
        train_set: Dataset,
        test_set: Dataset | None = None,
        teacher: TeacherLogits | None = None,
    ) -> TrainingResult:
        config = self.config
        if config.mode in (AugMode.KD, AugMode.KDW) and self.spec.upsilon and teacher is None:
            raise ConfigurationError(f"{config.mode.value} mode needs a teacher-logits file")
        augment_rng = self.rngs["augment"] if config.crop_pad or config.flip_p else None
        metrics: list[MetricsRecord] = []
        best_accuracy, best_epoch = -1.0, -1

        for epoch in range(self.start_epoch, config.epochs):
            started = time.perf_counter()
            kappa = self.kappa_for_epoch(epoch)
            loss_sum = correct = seen = converged = phases_run = 0.0
            free_steps = nudge_steps = 0.0
            batches = 0
            try:
                for batch, (index, images, labels) in enumerate(
                    iterate_batches(
                        train_set,
                        config.batch_size,
                        self.rngs["order"],
                        augment_rng=augment_rng,
                        crop_pad=config.crop_pad,
                        flip_p=config.flip_p,
                        pad_mode=config.pad_mode,
                    )
                ):
                    x = images.astype(self.dtype)
                    targets = self.targets_for(index, labels, kappa, teacher)
                    estimate, phases = self.train_batch(x, targets, epoch, batch)

                    steps = estimate.metadata["steps"]
                    free_steps += estimate.metadata["free_steps"]
                    nudge_steps += 0.5 * (steps["nudge+"] + steps["nudge-"])
                    phases_run += 3
                    converged += 3 - len(estimate.metadata["warnings"])
                    batches += 1

                    loss, _ = output_loss(phases.free.state.output, labels, "sum")
                    loss_sum += loss
                    correct += int(np.sum(np.argmax(phases.free.state.output, axis=1) == labels))
                    seen += len(labels)
                    logger.debug("epoch %d batch %d loss %.4f", epoch, batch, loss / len(labels))
            except DivergenceError:
                logger.error("Training diverged in epoch %d; last checkpoint kept", epoch)
                raise

            evaluation = self.evaluate(test_set) if test_set is not None else None
            record = MetricsRecord(
                epoch=epoch,
                kappa=kappa,
                learning_rate=self.optimizer.learning_rate(0, epoch),
                train_loss=loss_sum / max(seen, 1),
                train_accuracy=correct / max(seen, 1),
                test_loss=None if evaluation is None else evaluation.loss,
                test_accuracy=None if evaluation is None else evaluation.accuracy,
                converged_fraction=converged / max(phases_run, 1),
                mean_free_steps=free_steps / max(batches, 1),
                mean_nudge_steps=nudge_steps / max(batches, 1),
                retained_snapshots=self.ledger.peak,
            )
            metrics.append(record)
            logger.info(
                "epoch %d/%d kappa=%.4f train_loss=%.4f train_acc=%.4f test_acc=%s (%.1fs)",
                epoch + 1,
                config.epochs,
                kappa,
                record.train_loss,
                record.train_accuracy,
                "n/a" if record.test_accuracy is None else f"{record.test_accuracy:.4f}",
                time.perf_counter() - started,
            )
            self.events.emit(EPOCH_COMPLETED_EVENT, record=record)

            score = record.test_accuracy if record.test_accuracy is not None else record.train_accuracy
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
                self.save_checkpoint(LAST_CHECKPOINT, epoch)
            if score > best_accuracy:
                best_accuracy, best_epoch = score, epoch
                self.save_checkpoint(BEST_CHECKPOINT, epoch)

        return TrainingResult(
            weights=self.weights,
            metrics=metrics,
            best_accuracy=best_accuracy,
            best_epoch=best_epoch,
            retained_snapshots=self.ledger.peak,
        )

    def evaluate(self, dataset: Dataset, weights: WeightSet | None = None) -> EvaluationResult:
        """Free-phase inference: argmax of the output state, mean output loss."""
        weights = weights or self.weights
        settings = self.settings_for_epoch(0)
        rng = np.random.default_rng(self.config.seed)
        loss_sum = correct = converged = 0.0
        for index, images, labels in iterate_batches(dataset, self.config.batch_size, shuffle=False):
            free = run_free_phase(self.model, images.astype(self.dtype), weights, settings, rng)
            loss, _ = output_loss(free.state.output, labels, "sum")
            loss_sum += loss
            correct += int(np.sum(np.argmax(free.state.output, axis=1) == labels))
            converged += len(labels) if free.converged else 0
        total = max(len(dataset), 1)
        return EvaluationResult(
            loss=loss_sum / total, accuracy=correct / total, converged_fraction=converged / total, samples=len(dataset)
        )

    def trace_energies(
        self, dataset: Dataset, samples: int, epoch: int = 0, teacher: TeacherLogits | None = None, seed: int | None = None
    ) -> int:
        """Run the three phases one sample at a time and emit every phase result."""
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        picked = np.sort(rng.choice(len(dataset), size=min(samples, len(dataset)), replace=False))
        settings = self.settings_for_epoch(epoch)
        for sample_id in picked:
            index = np.array([sample_id])
            x = dataset.images[index].astype(self.dtype)
            targets = self.targets_for(index, dataset.labels[index], settings.kappa, teacher)
            phases = ep_phases(self.model, x, targets, self.weights, settings, rng=rng)
            for result in phases.results():
                self.events.emit(PHASE_COMPLETED_EVENT, result=result, sample_id=int(sample_id))
        return len(picked)

    def checkpoint(self, epoch: int) -> Checkpoint:
        tensors = dict(self.weights.named())
        tensors.update(self.optimizer.state())
        return Checkpoint(spec_digest=self.spec.digest(), epoch=epoch, seed=self.config.seed, tensors=tensors)

    def save_checkpoint(self, name: str, epoch: int) -> Path | None:
        if self.checkpoints is None or self.out_dir is None:
            return None
        path = self.checkpoints.write(self.out_dir / CHECKPOINT_DIR / name, self.checkpoint(epoch))
        self.events.emit(CHECKPOINT_SAVED_EVENT, path=path, epoch=epoch)
        return path

    def restore(self, checkpoint: Checkpoint) -> None:
        """Load weights (and momentum buffers when present) and resume after its epoch."""
        if checkpoint.spec_digest != self.spec.digest():
            raise DigestMismatchError("checkpoint was written for a different network")
        named = {name: value.astype(self.dtype) for name, value in checkpoint.tensors.items() if not name.startswith("momentum.")}
        missing = sorted(set(self.weights.named()) - set(named))
        if missing:
            raise ConfigurationError(f"checkpoint lacks parameters {missing}")
        self.weights = WeightSet.from_named(self.weights, named)
        self.optimizer.load_state({k: v.astype(self.dtype) for k, v in checkpoint.tensors.items() if k.startswith("momentum.")})
        self.start_epoch = checkpoint.epoch + 1
