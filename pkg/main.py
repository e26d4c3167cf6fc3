"""TrapSim command-line entry point: python main.py <command> ..."""

from app.cli.runner import run

if __name__ == "__main__":
    run()
