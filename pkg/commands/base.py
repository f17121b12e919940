import click

from config import Config, get_config
from models import ExperimentConfig
from services.experiment_service import ExperimentService


def current_profile() -> type[Config]:
    """Profile selected on the command group (``default`` outside of it)."""
    ctx = click.get_current_context(silent=True)
    if ctx is not None and ctx.obj and "profile" in ctx.obj:
        return ctx.obj["profile"]
    return get_config(None)


def load_experiment(path: str) -> ExperimentConfig:
    return ExperimentService.load_config(path, current_profile())


def parse_budgets(text: str) -> list[float]:
    """``"100,250.5,1e3"`` -> [100.0, 250.5, 1000.0]"""
    try:
        budgets = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"{text!r} is not a comma separated list of milliseconds")
    if not budgets or any(b < 0 for b in budgets):
        raise click.BadParameter("need at least one non-negative budget")
    return budgets
