import argparse

from src.cli.common import RunContext, add_run_flags, load_config, load_teacher
from src.helpers.constants import EXIT_OK
from src.helpers.events import Events
from src.helpers.logger import Logger
from src.repositories.checkpoints import CheckpointRepository
from src.repositories.datasets import DatasetRepository
from src.services.diagnostics import DiagnosticsLog
from src.services.trainer import EPTrainer
from src.workers.recorders import register_recorders

logger = Logger(__name__)

dataset_repository: DatasetRepository = DatasetRepository()
checkpoint_repository: CheckpointRepository = CheckpointRepository()


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="train a CRNN with three-phase equilibrium propagation")
    add_run_flags(parser, "train")
    parser.add_argument("--resume", help="checkpoint to continue from")
    parser.set_defaults(handler=cmd_train)


def cmd_train(args: argparse.Namespace) -> int:
    with RunContext("train", args.out) as run:
        config = load_config(args)
        run.bind(config)
        train_set = dataset_repository.load(config, "train", args.data)
        test_set = dataset_repository.load(config, "test", args.data)
        teacher = load_teacher(config.teacher_logits, train_set)

        events = Events()
        log = DiagnosticsLog()
        register_recorders(events, log, config.layer_stats_every, run.files)
        trainer = EPTrainer(
            config,
            events,
            checkpoint_repository,
            run.out_dir,
            teacher_dims=teacher.dims() if teacher is not None else None,
        )
        if args.resume:
            trainer.restore(checkpoint_repository.read(args.resume, trainer.spec.digest()))
            logger.info("Resuming from %s at epoch %d", args.resume, trainer.start_epoch)

        try:
            result = trainer.train(train_set, test_set, teacher)
        finally:
            run.export(log)

        run.summary.update(
            best_accuracy=result.best_accuracy,
            best_epoch=result.best_epoch,
            retained_snapshots=result.retained_snapshots,
            final_test_accuracy=result.metrics[-1].test_accuracy if result.metrics else None,
        )
        logger.info("Best accuracy %.4f at epoch %d", result.best_accuracy, result.best_epoch + 1)
    return EXIT_OK
