"""CLI entry point for nbafl"""

from .cli import main

if __name__ == "__main__":
    main()
