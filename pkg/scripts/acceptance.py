#!/usr/bin/env python3
"""Print one PASS/FAIL line per acceptance criterion (same checks as the test suite)."""

import runpy
import sys
from pathlib import Path

if __name__ == "__main__":
    sys.argv[0] = str(Path(__file__).resolve().parent.parent / "tests" / "test_acceptance.py")
    runpy.run_path(sys.argv[0], run_name="__main__")
