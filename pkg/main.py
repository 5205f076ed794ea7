import sys

# Everything lives in src.cli; this file just makes `python main.py <command>` work from the repo root.
from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
