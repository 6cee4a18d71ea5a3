import argparse

from src.cli import diagnose, evaluate, gradcheck, teacher, train
from src.core.config import settings


def setup_commands(prog: str = settings.PROJECT_NAME) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=prog, description="Equilibrium-propagation training for convergent recurrent networks"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    train.register(subparsers)
    gradcheck.register(subparsers)
    diagnose.register(subparsers)
    evaluate.register(subparsers)
    teacher.register(subparsers)
    return parser
