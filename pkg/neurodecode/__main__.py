"""Allow ``python -m neurodecode``."""

from __future__ import annotations

import sys

from neurodecode.cli import main

sys.exit(main())
