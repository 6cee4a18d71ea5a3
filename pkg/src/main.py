import sys
from collections.abc import Sequence

from src.cli import setup_commands
from src.helpers.constants import EXIT_INPUT_ERROR
from src.helpers.logger import Logger
from src.helpers.model import EngineError

logger = Logger(__name__)


def main(argv: Sequence[str] | None = None) -> int:
    parser = setup_commands()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT_ERROR if e.code else 0
    try:
        return args.handler(args)
    except EngineError as e:
        logger.error("%s: %s", type(e).__name__, e.error)
        print(f"error: {e.error}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
