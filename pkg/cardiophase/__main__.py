"""Allow ``python -m cardiophase``."""

import sys

from .cli import main

sys.exit(main())
