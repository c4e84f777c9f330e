"""Run the command-line interface with ``python -m hwcodesign``."""

import sys

from .cli import main

sys.exit(main())
