import logging

import click

from commands import init_app as init_commands
from config import PROFILES, get_config


def create_app(config_name: str | None = None) -> click.Group:
    """Application factory for the MQGrad simulator command line."""

    @click.group(help="Deterministic parameter-server simulator with learned gradient quantisation.")
    @click.option(
        "--profile",
        type=click.Choice(sorted(PROFILES), case_sensitive=False),
        default=config_name or "default",
        show_default=True,
        help="Configuration profile.",
    )
    @click.option("--log-level", default=None, help="Override the profile's log level.")
    @click.pass_context
    def cli(ctx: click.Context, profile: str, log_level: str | None):
        profile_cls = get_config(profile)
        level = (log_level or profile_cls.LOG_LEVEL).upper()
        logging.basicConfig(
            level=getattr(logging, level, logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        ctx.obj = {"profile": profile_cls}

    # Register sub-commands
    init_commands(cli)
    return cli


# Create a default command group for scripts and `python app.py`
cli = create_app()


if __name__ == "__main__":
    cli()
