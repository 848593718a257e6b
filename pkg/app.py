"""Entry point: ``python app.py <command> ...`` is the same as ``gridpipe <command> ...``."""
import sys

from gridpipe.cli import main

if __name__ == "__main__":
    sys.exit(main())
