"""python -m verirl"""
from verirl.cli import cli

if __name__ == "__main__":
    cli(prog_name="verirl")  # pylint: disable=no-value-for-parameter
