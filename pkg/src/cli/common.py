import argparse
import logging
from pathlib import Path
from typing import Any

from src.core.config import settings
from src.helpers.constants import EXIT_OK, EXIT_PROPERTY_FAILURE, MANIFEST_JSON, RUN_LOG
from src.helpers.logger import Logger, attach_run_log, detach_run_log
from src.helpers.model import EngineError
from src.models.datasets import Dataset
from src.models.runs import RunManifest, TeacherLogits
from src.models.training import TrainConfig
from src.repositories.runs import RunRepository
from src.repositories.teacher_logits import TeacherLogitsRepository
from src.services.diagnostics import DiagnosticsLog

logger = Logger(__name__)

run_repository: RunRepository = RunRepository()
teacher_logits_repository: TeacherLogitsRepository = TeacherLogitsRepository()


def add_run_flags(parser: argparse.ArgumentParser, command: str) -> None:
    parser.add_argument("--config", help="run-config file (key = value per line)")
    parser.add_argument("--data", help="dataset directory (MNIST IDX or CIFAR binary files)")
    parser.add_argument("--out", default=f"runs/{command}", help="run directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=["std", "le", "kd", "kdw"])
    parser.add_argument("--beta", type=float)
    parser.add_argument("--kappa", type=float)
    parser.add_argument("--scheduler", choices=["constant", "linear", "exp", "cosine"])
    parser.add_argument("--precision", choices=["f32", "f64"])
    parser.add_argument("--upsilon", help="comma separated layers receiving the augmentation signal")
    parser.add_argument("--teacher-logits", help="teacher-logits file for kd and kdw runs")


def overrides_from(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "seed": args.seed,
        "mode": args.mode,
        "beta": args.beta,
        "kappa": args.kappa,
        "kappa_scheduler": args.scheduler,
        "precision": args.precision,
        "upsilon": args.upsilon,
        "teacher_logits": args.teacher_logits,
    }


def load_config(args: argparse.Namespace, **extra: Any) -> TrainConfig:
    """Model defaults, then the config file, then command-line flags."""
    return run_repository.load_config(args.config, {**overrides_from(args), **extra})


def load_teacher(path: str | None, dataset: Dataset) -> TeacherLogits | None:
    if path is None:
        return None
    return teacher_logits_repository.load(path, dataset.digest(), len(dataset))


class RunContext:
    """One command's run directory: run log, manifest and exit code.

    The manifest is written on exit whatever happens inside the block; an
    `EngineError` is recorded with its exit code and re-raised.
    """

    def __init__(self, command: str, out_dir: str | Path, repository: RunRepository | None = None):
        self.command = command
        self.out_dir = Path(out_dir)
        self.repository = repository or run_repository
        self.exit_code = EXIT_OK
        self.manifest = RunManifest(
            command=command,
            config={},
            seed=0,
            code_version=settings.VERSION,
            out_dir=str(self.out_dir),
        )
        self._handler: logging.Handler | None = None

    @property
    def files(self) -> dict[str, str]:
        return self.manifest.files

    @property
    def summary(self) -> dict[str, Any]:
        return self.manifest.summary

    def bind(self, config: TrainConfig) -> None:
        self.manifest.config = config.model_dump(mode="json")
        self.manifest.seed = config.seed
        self.manifest.network_digest = config.network_spec().digest()

    def export(self, log: DiagnosticsLog, out_dir: str | Path | None = None, prefix: str = "") -> None:
        for name, path in log.export(out_dir or self.out_dir).items():
            self.files[f"{prefix}{name}"] = str(path)

    def __enter__(self) -> "RunContext":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._handler = attach_run_log(self.out_dir / RUN_LOG)
        self.files["run_log"] = str(self.out_dir / RUN_LOG)
        logger.info("Starting %s: %s, version: %s", self.command, settings.PROJECT_NAME, settings.VERSION)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if isinstance(exc, EngineError):
            self.exit_code = exc.exit_code
            logger.error("%s failed: %s", self.command, exc.error)
        elif exc is not None:
            self.exit_code = EXIT_PROPERTY_FAILURE
        self.manifest.finish(self.exit_code)
        try:
            self.files.setdefault("manifest", str(self.out_dir / MANIFEST_JSON))
            self.repository.write_manifest(self.out_dir, self.manifest)
        except OSError as e:
            logger.error("Could not write run manifest to %s: %r", self.out_dir, e)
        logger.info("%s finished with exit code %d", self.command, self.exit_code)
        if self._handler is not None:
            detach_run_log(self._handler)
            self._handler = None
        return False
