"""Permite `python -m maod ...`."""
import sys

from maod.cli import main

if __name__ == '__main__':
    sys.exit(main())
