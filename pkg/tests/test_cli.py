from pathlib import Path

import pytest

from src.cli.gradcheck import bias_order_checks
from src.core.config import settings as app_settings
from src.helpers.constants import (
    BETA_SWEEP_CSV,
    CHECKPOINT_DIR,
    COMPARISONS_CSV,
    LAST_CHECKPOINT,
    METRICS_CSV,
    RUN_LOG,
    TEACHER_LOGITS_FILE,
)
from src.main import main
from src.models.diagnostics import ComparisonRecord
from src.repositories.records import RecordRepository
from src.repositories.runs import RunRepository
from src.services.oracle import BiasOrderFit

runs = RunRepository()

SHIPPED_GRADCHECK = Path(__file__).resolve().parents[1] / "configs" / "tiny_gradcheck.env"

SMOOTH_GRADCHECK = """\
dataset=blobs
input_shape=1,4,4
architecture=conv3-4,conv3-4,fc-3
synth_samples=24
beta=0.01
t_free=100
t_nudge=100
tol=1e-14
weight_scale=0.15
bias_init=0.5
learning_rates=0.03x3
batch_size=8
precision=f64
seed=7
"""


@pytest.fixture
def smooth_config(tmp_path):
    path = tmp_path / "smooth.env"
    path.write_text(SMOOTH_GRADCHECK)
    return path


def test_gradcheck_writes_reports(smooth_config, tmp_path):
    out = tmp_path / "gradcheck"
    assert main(["gradcheck", "--config", str(smooth_config), "--out", str(out)]) == 0

    manifest = runs.read_manifest(out)
    assert manifest.exit_code == 0
    assert manifest.seed == 7
    checks = manifest.summary["checks"]
    assert set(checks) == {
        "cosine_bptt_ep3",
        "layer_cosine_bptt_ep3",
        "cosine_fd_ep3",
        "bias_order_slope",
        "bias_order_ratios",
    }
    assert all(checks.values())
    assert len(manifest.summary["bias_order_ratios"]) == 3
    assert manifest.summary["fd_eps"] == 1e-4

    rows = RecordRepository().read(out / COMPARISONS_CSV, ComparisonRecord)
    assert {(r.reference, r.candidate) for r in rows if r.tensor == "all"} == {
        ("bptt", "ep3"),
        ("fd", "ep3"),
        ("fd", "bptt"),
        ("bptt", "ep2+"),
        ("bptt", "ep2-"),
    }
    assert (out / BETA_SWEEP_CSV).exists()
    assert "Starting gradcheck" in (out / RUN_LOG).read_text()


def test_bias_order_gate_needs_slope_and_ratios():
    assert all(bias_order_checks(BiasOrderFit(slope=2.0, intercept=0.0, ratios=[4.0, 3.8, 4.1])).values())
    # slope in band, one halving far off
    uneven = bias_order_checks(BiasOrderFit(slope=1.9, intercept=0.0, ratios=[1.7, 5.1, 5.9]))
    assert uneven == {"bias_order_slope": True, "bias_order_ratios": False}
    assert not bias_order_checks(BiasOrderFit(slope=1.0, intercept=0.0, ratios=[]))["bias_order_ratios"]


@pytest.mark.slow
def test_shipped_gradcheck_config_passes(tmp_path):
    out = tmp_path / "shipped"
    assert main(["gradcheck", "--config", str(SHIPPED_GRADCHECK), "--out", str(out)]) == 0
    summary = runs.read_manifest(out).summary
    assert all(summary["checks"].values())
    assert 1.6 <= summary["bias_order_slope"] <= 2.4
    assert summary["parameters"] <= 5000


def test_broken_estimator_fails_gradcheck(tiny_config, tmp_path):
    out = tmp_path / "broken"
    assert main(["gradcheck", "--config", str(tiny_config), "--out", str(out), "--break-estimator"]) == 1
    assert runs.read_manifest(out).exit_code == 1


def test_gradcheck_parameter_guard(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setattr(app_settings, "GRADCHECK_MAX_PARAMETERS", 10)
    out = tmp_path / "guarded"
    assert main(["gradcheck", "--config", str(tiny_config), "--out", str(out)]) == 3
    assert runs.read_manifest(out).exit_code == 3


def test_training_is_reproducible_and_evaluable(tiny_config, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["train", "--config", str(tiny_config), "--out", str(first)]) == 0
    assert main(["train", "--config", str(tiny_config), "--out", str(second)]) == 0
    assert (first / METRICS_CSV).read_bytes() == (second / METRICS_CSV).read_bytes()

    checkpoint = first / CHECKPOINT_DIR / LAST_CHECKPOINT
    evaluated = tmp_path / "eval"
    code = main(["eval", "--config", str(tiny_config), "--checkpoint", str(checkpoint), "--out", str(evaluated)])
    assert code == 0
    summary = runs.read_manifest(evaluated).summary
    assert summary["accuracy"] == runs.read_manifest(first).summary["final_test_accuracy"]
    assert summary["epoch"] == 1


def test_corrupt_checkpoint_exits_with_corruption_code(tiny_config, tmp_path):
    out = tmp_path / "train"
    assert main(["train", "--config", str(tiny_config), "--out", str(out), "--seed", "1"]) == 0
    payload = bytearray((out / CHECKPOINT_DIR / LAST_CHECKPOINT).read_bytes())
    payload[60] ^= 0xFF
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(bytes(payload))
    code = main(["eval", "--config", str(tiny_config), "--seed", "1", "--checkpoint", str(corrupt), "--out", str(tmp_path / "eval")])
    assert code == 4


def test_input_errors(tmp_path):
    config = tmp_path / "mnist.env"
    config.write_text("dataset=mnist\ninput_shape=1,28,28\narchitecture=fc-10\nlearning_rates=0.1x1\n")
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "a")]) == 2
    assert main(["train", "--config", str(config), "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "b")]) == 2
    assert main(["train", "--config", str(tmp_path / "absent.env"), "--out", str(tmp_path / "c")]) == 2
    assert main(["eval", "--config", str(config)]) == 2
    assert main(["train", "--mode", "distill"]) == 2


def test_teacher_logits_feed_distillation(tiny_config, tmp_path):
    tiny_config.write_text(tiny_config.read_text() + "teacher_taps=0:0\n")
    teacher_dir = tmp_path / "teacher"
    assert main(["train-teacher", "--config", str(tiny_config), "--out", str(teacher_dir)]) == 0
    logits = teacher_dir / TEACHER_LOGITS_FILE.format(split="train")
    assert runs.read_manifest(teacher_dir).summary["dims"] == {"-1": 3, "0": 2}

    flags = ["--mode", "kd", "--upsilon", "0", "--kappa", "0.5", "--teacher-logits", str(logits)]
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "kd"), *flags]) == 0
    # another seed draws another dataset, so the logits no longer match it
    mismatched = main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "other"), "--seed", "8", *flags])
    assert mismatched == 2


def test_diagnose_pairs_standard_and_augmented_runs(tiny_config, tmp_path):
    out = tmp_path / "diagnose"
    flags = ["--mode", "le", "--upsilon", "0", "--kappa", "0.5", "--epochs", "1", "--samples", "2", "--layers", "0"]
    assert main(["diagnose", "--config", str(tiny_config), "--out", str(out), *flags]) == 0
    summary = runs.read_manifest(out).summary
    assert summary["vanishing_ratio"] > 0.0
    assert summary["traced_samples"] == 2
    for label in ("standard", "augmented"):
        assert (out / label / METRICS_CSV).exists()
    assert main(["diagnose", "--config", str(tiny_config), "--out", str(tmp_path / "plain")]) == 2


@pytest.mark.slow
def test_mnist_gradcheck_on_sampled_entries(data_dir, tmp_path):
    config = tmp_path / "mnist.env"
    config.write_text(
        "dataset=mnist\ninput_shape=1,28,28\narchitecture=conv3-4,maxpool,fc-10\nlearning_rates=0.03x2\n"
        "batch_size=4\nt_free=40\nt_nudge=20\nbeta=0.05\ntol=0\ntrain_subset=8\n"
    )
    out = tmp_path / "gradcheck"
    code = main(["gradcheck", "--config", str(config), "--data", str(data_dir), "--entries", "20", "--out", str(out)])
    assert code in (0, 1)
    assert runs.read_manifest(out).summary["parameters"] > 20
