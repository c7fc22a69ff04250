"""Run the command line with ``python -m noetherrazor``."""
import sys

from .cli import main

sys.exit(main())
