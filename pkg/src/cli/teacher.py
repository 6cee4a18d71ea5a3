import argparse

import numpy as np

from src.cli.common import RunContext, add_run_flags, load_config, teacher_logits_repository
from src.helpers.constants import EXIT_OK, TEACHER_LOGITS_FILE
from src.helpers.logger import Logger
from src.models.network import FeedForwardSpec
from src.repositories.datasets import DatasetRepository
from src.services.teacher import FeedForwardNet, train_teacher

logger = Logger(__name__)

dataset_repository: DatasetRepository = DatasetRepository()


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "train-teacher", help="train the feed-forward reference network and export distillation logits"
    )
    add_run_flags(parser, "train-teacher")
    parser.set_defaults(handler=cmd_train_teacher)


def cmd_train_teacher(args: argparse.Namespace) -> int:
    """The config's `architecture` is the reference network; `teacher_taps` picks the exported layers."""
    with RunContext("train-teacher", args.out) as run:
        config = load_config(args)
        run.bind(config)
        spec = FeedForwardSpec(
            input_shape=config.input_shape,
            layers=config.network_spec().layers,
            taps=config.teacher_taps,
        )
        train_set = dataset_repository.load(config, "train", args.data)
        test_set = dataset_repository.load(config, "test", args.data)

        logits, weights, accuracy = train_teacher(train_set, spec, config)
        test_logits = FeedForwardNet(spec).logits(test_set, weights)
        test_accuracy = float(np.mean(np.argmax(test_logits.layers[-1], axis=1) == test_set.labels))

        for split, exported in (("train", logits), ("test", test_logits)):
            path = teacher_logits_repository.write(run.out_dir / TEACHER_LOGITS_FILE.format(split=split), exported)
            run.files[f"teacher_logits_{split}"] = str(path)
        run.summary.update(
            train_accuracy=accuracy,
            test_accuracy=test_accuracy,
            dims={str(key): dim for key, dim in logits.dims().items()},
        )
        logger.info("Reference network: train acc %.4f, test acc %.4f", accuracy, test_accuracy)
    return EXIT_OK
