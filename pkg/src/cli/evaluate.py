import argparse

from src.cli.common import RunContext, add_run_flags, load_config
from src.helpers.constants import EXIT_OK
from src.helpers.logger import Logger
from src.repositories.checkpoints import CheckpointRepository
from src.repositories.datasets import DatasetRepository
from src.services.trainer import EPTrainer

logger = Logger(__name__)

dataset_repository: DatasetRepository = DatasetRepository()
checkpoint_repository: CheckpointRepository = CheckpointRepository()


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="free-phase top-1 accuracy of a checkpoint")
    add_run_flags(parser, "eval")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--split", choices=["train", "test"], default="test")
    parser.set_defaults(handler=cmd_eval)


def cmd_eval(args: argparse.Namespace) -> int:
    with RunContext("eval", args.out) as run:
        config = load_config(args)
        run.bind(config)
        trainer = EPTrainer(config)
        checkpoint = checkpoint_repository.read(args.checkpoint, trainer.spec.digest())
        trainer.restore(checkpoint)
        dataset = dataset_repository.load(config, args.split, args.data)

        result = trainer.evaluate(dataset)
        run.files["checkpoint"] = str(args.checkpoint)
        run.summary.update(result.model_dump(), epoch=checkpoint.epoch, split=args.split)
        logger.info("Checkpoint from epoch %d: accuracy %.4f on %d samples", checkpoint.epoch + 1, result.accuracy, result.samples)
        print(f"accuracy {result.accuracy:.6f}")
    return EXIT_OK
