import click

from services.experiment_service import ExperimentService

from .base import load_experiment
from .errors import handle_errors


@click.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False), help="Defaults to experiment.output_dir.")
@handle_errors
def run(config_path: str, out_dir: str | None):
    """Run one experiment and write its trace and summary."""
    cfg = load_experiment(config_path)
    result = ExperimentService.run_experiment(cfg, out_dir)
    summary = result.summary
    status = "DIVERGED" if result.diverged else "ok"
    click.echo(
        f"{cfg.label}: {summary['iterations']} iterations, "
        f"final loss {summary['final_loss']}, "
        f"{summary['total_sim_time_ms']:.3f} simulated ms, "
        f"{summary['total_bytes']} bytes [{status}] -> {result.output_dir}"
    )
