"""Allow ``python -m fedlsi``."""

import sys

from .cli import main

sys.exit(main())
