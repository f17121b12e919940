import click

from services.experiment_service import ExperimentService

from .base import load_experiment, parse_budgets
from .errors import handle_errors


@click.command()
@click.option("--configs", "first", required=True, type=click.Path(exists=True, dir_okay=False))
@click.argument("more", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--budgets", required=True, help="Simulated time budgets in ms, e.g. 100,500,1000.")
@click.option("--out", "out_dir", default="runs/sweep", show_default=True, type=click.Path(file_okay=False))
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1))
@handle_errors
def sweep(first: str, more: tuple[str, ...], budgets: str, out_dir: str, jobs: int):
    """Run several experiments and tabulate accuracy and loss at each budget.

    Extra config paths may follow the first one: --configs a.ini b.ini c.ini
    """
    configs = [load_experiment(path) for path in (first, *more)]
    table, _ = ExperimentService.run_sweep(configs, parse_budgets(budgets), out_dir, jobs=jobs)
    click.echo(table.to_csv(), nl=False)
