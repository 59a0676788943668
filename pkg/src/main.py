# src/main.py

import logging

from .interface import run

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level=logging.INFO):
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv=None):
    configure_logging()
    return run(argv)


if __name__ == "__main__":
    import sys

    sys.exit(main())
