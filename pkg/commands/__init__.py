import click

from .calibrate import calibrate
from .run import run
from .summarize import summarize
from .sweep import sweep


def init_app(cli: click.Group):
    """Register every sub-command with the command group"""
    cli.add_command(run)
    cli.add_command(sweep)
    cli.add_command(summarize)
    cli.add_command(calibrate)
