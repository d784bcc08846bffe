#!/usr/bin/env python3
"""
Script to run the activity pipeline from a checkout
"""
import logging
import os
import sys

# Add the repository root to the Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from trace_har.cli import main  # noqa: E402

logger = logging.getLogger(__name__)

if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Run interrupted by user")
        sys.exit(130)
