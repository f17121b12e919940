"""Error handling for sub-commands."""

import logging
from functools import wraps

import click

from models import ConfigurationError
from services.cluster_service import ProtocolError
from services.mdp_controller import MdpError
from services.quant_codec import CorruptionError, NonFiniteError

logger = logging.getLogger(__name__)

HANDLED = (ConfigurationError, CorruptionError, NonFiniteError, ProtocolError, MdpError, OSError)


def handle_errors(f):
    """Turn domain errors into a one-line diagnostic and exit code 1."""

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except HANDLED as exc:
            logger.debug("Command failed", exc_info=True)
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc

    return decorated_function
