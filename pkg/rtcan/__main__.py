"""Entry point for python -m rtcan."""

from .cli import run

if __name__ == "__main__":
    run()
