import argparse

from src.cli.common import RunContext, add_run_flags, load_config, load_teacher
from src.helpers.constants import EXIT_OK
from src.helpers.events import Events
from src.helpers.logger import Logger
from src.helpers.model import ConfigurationError
from src.models.datasets import Dataset
from src.models.runs import TeacherLogits
from src.models.training import AugMode, TrainConfig
from src.repositories.datasets import DatasetRepository
from src.services.diagnostics import DiagnosticsLog, vanishing_ratio
from src.services.trainer import EPTrainer
from src.workers.recorders import register_recorders

logger = Logger(__name__)

dataset_repository: DatasetRepository = DatasetRepository()


def _layers(value: str) -> list[int]:
    return [int(item) for item in value.split(",") if item.strip()]


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "diagnose", help="paired standard/augmented runs with layer statistics and energy traces"
    )
    add_run_flags(parser, "diagnose")
    parser.add_argument("--epochs", type=int, help="length of each short run")
    parser.add_argument("--samples", type=int, help="samples traced through the three phases")
    parser.add_argument("--layers", type=_layers, help="layers for the vanishing-gradient ratio (default: hidden layers)")
    parser.set_defaults(handler=cmd_diagnose)


def standard_counterpart(config: TrainConfig) -> TrainConfig:
    """The same run with augmentation switched off."""
    values = config.model_dump()
    values.update(mode=AugMode.NONE, upsilon=[], kappa=0.0, teacher_logits=None, test_teacher_logits=None)
    return TrainConfig.model_validate(values)


def short_run(
    config: TrainConfig, train_set: Dataset, teacher: TeacherLogits | None, samples: int, log: DiagnosticsLog
) -> DiagnosticsLog:
    events = Events()
    register_recorders(events, log, config.layer_stats_every)
    trainer = EPTrainer(config, events, teacher_dims=teacher.dims() if teacher is not None else None)
    trainer.train(train_set, teacher=teacher)
    trainer.trace_energies(train_set, samples, epoch=config.epochs - 1, teacher=teacher)
    return log


def cmd_diagnose(args: argparse.Namespace) -> int:
    with RunContext("diagnose", args.out) as run:
        config = load_config(args, epochs=args.epochs)
        run.bind(config)
        if config.mode == AugMode.NONE or not config.network_spec().upsilon:
            raise ConfigurationError("diagnose compares against an augmented run; set mode and upsilon")
        train_set = dataset_repository.load(config, "train", args.data)
        teacher = load_teacher(config.teacher_logits, train_set)
        samples = args.samples or config.energy_trace_samples

        logs: dict[str, DiagnosticsLog] = {}
        for label, run_config, run_teacher in (
            ("standard", standard_counterpart(config), None),
            ("augmented", config, teacher),
        ):
            logger.info("Diagnostic run: %s (%d epochs)", label, run_config.epochs)
            logs[label] = DiagnosticsLog()
            try:
                short_run(run_config, train_set, run_teacher, samples, logs[label])
            finally:
                run.export(logs[label], run.out_dir / label, prefix=f"{label}_")

        spec = config.network_spec()
        layers = args.layers or list(range(1, spec.n_total - 1))
        ratio = vanishing_ratio(logs["standard"].layer_stats, logs["augmented"].layer_stats, layers, config.epochs - 1)
        run.summary.update(vanishing_ratio=ratio, layers=layers, traced_samples=samples)
        logger.info("Vanishing-gradient ratio over layers %s: %.3f", layers, ratio)
        print(f"vanishing-gradient ratio {ratio:.6g}")
    return EXIT_OK
