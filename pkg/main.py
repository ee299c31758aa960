#!/usr/bin/env python3
"""
medattn - attention-based multi-label diagnosis prediction from clinical notes

Entry point for the command line; see `python main.py --help`.
"""

import sys
import os

# Add src to path for imports
if __name__ == "__main__":
    # Only add path when running as main script
    sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))
else:
    # When imported, use current directory
    sys.path.insert(0, os.path.join(os.getcwd(), "src"))


def main(argv=None) -> int:
    """Run the medattn command line and return its exit code"""
    from apps.cli import main as cli_main

    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
