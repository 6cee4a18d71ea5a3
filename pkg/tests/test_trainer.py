import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.helpers.constants import BATCH_COMPLETED_EVENT, PHASE_COMPLETED_EVENT
from src.helpers.events import Events
from src.helpers.model import ConfigurationError, DigestMismatchError
from src.models.diagnostics import PhaseTag
from src.models.gradients import Estimator, GradientEstimate
from src.models.runs import TeacherLogits
from src.models.training import AugMode, TrainConfig
from src.repositories.checkpoints import CheckpointRepository
from src.repositories.datasets import synth_dataset
from src.services.estimators import EPPhases
from src.services.diagnostics import DiagnosticsLog
from src.services.trainer import EPTrainer, update_aux_weights
from src.workers.recorders import register_recorders

BASE = dict(
    dataset="blobs",
    input_shape=(1, 4, 4),
    architecture="conv3-2,maxpool,fc-3",
    beta=0.05,
    t_free=60,
    t_nudge=60,
    tol=1e-10,
    weight_scale=0.5,
    learning_rates="0.05x2",
    lr_scheduler="constant",
    momentum=0.5,
    weight_decay=0.0,
    batch_size=8,
    epochs=2,
    layer_stats_every=1,
    precision="f64",
    seed=3,
)


def config(**overrides) -> TrainConfig:
    return TrainConfig.model_validate({**BASE, **overrides})


@pytest.fixture
def blobs():
    return synth_dataset("blobs", 24, seed=3, num_classes=3, side=4)


def test_training_runs_and_records(blobs):
    events = Events()
    log = DiagnosticsLog()
    register_recorders(events, log, 1)
    trainer = EPTrainer(config(), events)
    before = trainer.weights.copy()
    result = trainer.train(blobs, blobs)

    assert len(result.metrics) == 2
    assert [m.epoch for m in log.metrics] == [0, 1]
    assert result.retained_snapshots == 3
    assert 0.0 <= result.best_accuracy <= 1.0
    assert result.metrics[-1].test_accuracy is not None
    assert not np.array_equal(before.weights[1], trainer.weights.weights[1])
    # three batches per epoch, three phases, two layers
    assert len(log.layer_stats) == 2 * 3 * 3 * 2
    assert {r.phase for r in log.layer_stats} == set(PhaseTag)


def test_training_is_reproducible(blobs):
    first = EPTrainer(config()).train(blobs)
    second = EPTrainer(config()).train(blobs)
    for a, b in zip(first.weights.named().values(), second.weights.named().values()):
        assert_array_equal(a, b)
    assert [m.train_loss for m in first.metrics] == [m.train_loss for m in second.metrics]


def test_standard_and_augmented_runs_share_initialisation():
    standard = EPTrainer(config())
    augmented = EPTrainer(config(mode="le", upsilon="0", kappa=0.5))
    for a, b in zip(standard.weights.weights, augmented.weights.weights):
        assert_array_equal(a, b)
    assert 0 in augmented.weights.projections


def test_kappa_follows_the_schedule():
    trainer = EPTrainer(config(mode="le", upsilon="0", kappa=0.6, kappa_scheduler="linear", epochs=4))
    assert trainer.kappa_for_epoch(0) == pytest.approx(0.6)
    assert trainer.kappa_for_epoch(2) == pytest.approx(0.3)
    assert trainer.kappa_for_epoch(10) == pytest.approx(0.0)
    assert EPTrainer(config(kappa=0.6)).kappa_for_epoch(0) == 0.0


def test_local_error_training_updates_projections(blobs):
    trainer = EPTrainer(config(mode="le", upsilon="0", kappa=0.5, epochs=1))
    before = trainer.weights.projections[0].copy()
    trainer.train(blobs)
    assert not np.array_equal(before, trainer.weights.projections[0])


def test_frozen_projections_stay_put(blobs):
    trainer = EPTrainer(config(mode="le", upsilon="0", kappa=0.5, epochs=1, projection_trainable=False))
    before = trainer.weights.projections[0].copy()
    trainer.train(blobs)
    assert_array_equal(before, trainer.weights.projections[0])


def test_distillation_needs_teacher_logits(blobs):
    trainer = EPTrainer(config(mode="kd", upsilon="0", kappa=0.5))
    with pytest.raises(ConfigurationError):
        trainer.train(blobs)


def test_aux_gradients_need_an_aux_mode():
    trainer = EPTrainer(config())
    grad = GradientEstimate(tensors={"projections.0": np.zeros((3, 8))}, estimator=Estimator.EP3)
    with pytest.raises(ConfigurationError):
        update_aux_weights(trainer.weights, grad, trainer.optimizer, 0, trainer.config)
    empty = GradientEstimate(tensors={}, estimator=Estimator.EP3)
    assert update_aux_weights(trainer.weights, empty, trainer.optimizer, 0, trainer.config) is trainer.weights


def test_checkpoint_restore(tmp_path, blobs):
    repository = CheckpointRepository()
    trainer = EPTrainer(config(epochs=1), checkpoints=repository, out_dir=tmp_path)
    trainer.train(blobs)
    saved = repository.read(tmp_path / "checkpoints" / "last.ckpt", trainer.spec.digest())
    assert saved.epoch == 0
    assert any(name.startswith("momentum.") for name in saved.tensors)

    fresh = EPTrainer(config(epochs=1))
    fresh.restore(saved)
    assert fresh.start_epoch == 1
    for a, b in zip(trainer.weights.named().values(), fresh.weights.named().values()):
        assert_array_equal(a, b)

    other = EPTrainer(config(architecture="conv3-4,maxpool,fc-3"))
    with pytest.raises(DigestMismatchError):
        other.restore(saved)


def test_evaluate_is_deterministic(blobs):
    trainer = EPTrainer(config())
    first = trainer.evaluate(blobs)
    second = trainer.evaluate(blobs)
    assert first == second
    assert first.samples == 24
    assert 0.0 <= first.accuracy <= 1.0


def test_energy_traces_cover_three_phases(blobs):
    events = Events()
    seen = []
    events.on(PHASE_COMPLETED_EVENT, lambda result, sample_id: seen.append((sample_id, result.phase)))
    traced = EPTrainer(config(), events).trace_energies(blobs, 4)
    assert traced == 4
    assert len(seen) == 12
    assert {phase for _, phase in seen} == {"free", "nudge+", "nudge-"}


def test_targets_for_picks_teacher_rows():
    trainer = EPTrainer(config(mode="kd", upsilon="0", kappa=0.5))
    teacher = TeacherLogits(dataset_digest="00" * 32, layers={0: np.arange(12.0).reshape(6, 2), -1: np.zeros((6, 3))})
    targets = trainer.targets_for(np.array([1, 4]), np.array([0, 2]), 0.5, teacher)
    assert set(targets.teacher_logits) == {0}
    assert_array_equal(targets.teacher_logits[0], [[2.0, 3.0], [8.0, 9.0]])
    assert targets.kappa == 0.5
    assert trainer.config.mode == AugMode.KD


def test_layer_stats_carry_each_phase_gradient(blobs):
    events = Events()
    log = DiagnosticsLog()
    register_recorders(events, log, 1)
    produced = []
    events.on(BATCH_COMPLETED_EVENT, lambda phase_gradients, **_: produced.append(phase_gradients()))
    EPTrainer(config(epochs=1), events).train(blobs)

    first = produced[0]
    assert first[PhaseTag.FREE].estimator == Estimator.EP3
    assert first[PhaseTag.NUDGE_POS].estimator == Estimator.EP2_POS
    assert first[PhaseTag.NUDGE_NEG].estimator == Estimator.EP2_NEG
    rows = {(r.phase, r.layer): r.grad_abs_sum for r in log.layer_stats if r.epoch == 0 and r.batch == 0}
    for tag, estimate in first.items():
        for layer in (0, 1):
            expected = np.abs(estimate.tensors[f"layers.{layer}.weight"]).sum()
            assert rows[(tag, layer)] == pytest.approx(expected)
    assert rows[(PhaseTag.NUDGE_POS, 1)] != rows[(PhaseTag.NUDGE_NEG, 1)]


def record_batches(trainer: EPTrainer, data) -> list[tuple[EPPhases, GradientEstimate]]:
    seen: list[tuple[EPPhases, GradientEstimate]] = []
    trainer.events.on(BATCH_COMPLETED_EVENT, lambda phases, estimate, **_: seen.append((phases, estimate)))
    trainer.train(data)
    return seen


@pytest.mark.parametrize(
    "overrides",
    [dict(mode="le", upsilon="0", kappa=0.0), dict(mode="le", upsilon="", kappa=0.65)],
    ids=["zero-kappa", "no-signal-layers"],
)
def test_switched_off_augmentation_trains_like_standard_ep(blobs, overrides):
    standard = EPTrainer(config(epochs=3))
    reduced = EPTrainer(config(epochs=3, **overrides))
    standard_batches = record_batches(standard, blobs)
    reduced_batches = record_batches(reduced, blobs)

    assert len(reduced_batches) == len(standard_batches) == 9
    for (phases, estimate), (other_phases, other_estimate) in zip(standard_batches, reduced_batches):
        for result, other in zip(phases.results(), other_phases.results()):
            for a, b in zip(result.state.layers, other.state.layers):
                assert_array_equal(a, b)
        assert set(other_estimate.tensors) == set(estimate.tensors)
        for name, value in estimate.tensors.items():
            assert_array_equal(other_estimate.tensors[name], value)
    for a, b in zip(standard.weights.weights, reduced.weights.weights):
        assert_array_equal(a, b)
    for a, b in zip(standard.weights.biases, reduced.weights.biases):
        assert_array_equal(a, b)


@pytest.mark.parametrize("t_free", [50, 100, 200])
def test_training_keeps_three_snapshots_per_batch(blobs, t_free):
    result = EPTrainer(config(t_free=t_free, tol=0.0, epochs=1)).train(blobs)
    assert result.retained_snapshots <= 3


def test_separable_classes_are_learned_completely():
    data = synth_dataset("blobs", 64, seed=5, num_classes=2, separation=8.0, side=4)
    trainer = EPTrainer(
        config(
            architecture="fc-16,fc-2",
            beta=0.25,
            t_free=60,
            t_nudge=30,
            tol=1e-8,
            weight_scale=0.5,
            bias_init=0.5,
            learning_rates="0.05x2",
            momentum=0.5,
            epochs=20,
        )
    )
    result = trainer.train(data)
    assert max(m.train_accuracy for m in result.metrics) == 1.0
