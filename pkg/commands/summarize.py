import click

from services.experiment_service import ExperimentService

from .errors import handle_errors


@click.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False), help="Write the JSON here instead of stdout.")
@handle_errors
def summarize(trace_path: str, out_path: str | None):
    """Recompute a run's summary JSON from its trace CSV."""
    text = ExperimentService.summary_to_json(
        ExperimentService.summarize(ExperimentService.read_trace(trace_path))
    )
    if out_path:
        with open(out_path, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        click.echo(text, nl=False)
