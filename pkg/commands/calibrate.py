import click

from services.experiment_service import ExperimentService

from .base import load_experiment
from .errors import handle_errors


@click.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@handle_errors
def calibrate(config_path: str):
    """Print Adaptive thresholds from a Fix (8-bit) warm-up of the config's cluster."""
    cfg = load_experiment(config_path)
    thresholds = ExperimentService.calibrate(cfg)
    click.echo("thresholds = " + ", ".join(repr(t) for t in thresholds))
