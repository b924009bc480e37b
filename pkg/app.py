"""Run the scene perception pipeline: ``python app.py run --config run.cfg``."""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
