# app.py
# harmonia command line: BFP conversion, EMA model, KV storage and the toy attention simulation

import os
import sys

import click
from dotenv import load_dotenv
from loguru import logger

load_dotenv()

# MVC components
from controllers.conversion_controller import ConversionController
from routes.convert_routes import register_convert_commands
from routes.ema_routes import register_ema_commands
from routes.simulation_routes import register_simulation_commands

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{function} - {message}"


def _stderr_sink(message):
    # resolve sys.stderr per message so redirected streams are honoured
    sys.stderr.write(message)


def configure_logging(level=None):
    """Single stderr sink; the level comes from HARMONIA_LOG_LEVEL unless given."""
    logger.remove()
    logger.add(_stderr_sink, level=(level or os.getenv("HARMONIA_LOG_LEVEL", "INFO")).upper(),
               format=LOG_FORMAT, colorize=False)


def create_app():
    """
    Application factory: build the command group and register every command on it.

    Returns:
        click.Group: the `harmonia` command line
    """
    configure_logging()

    @click.group(name="harmonia")
    @click.option("--verbose", "-v", is_flag=True, help="debug logging on stderr")
    def cli(verbose):
        """Block floating point emulation of an LLM accelerator datapath."""
        if verbose:
            configure_logging("DEBUG")

    conversion_controller = ConversionController()
    register_convert_commands(cli, conversion_controller)
    register_ema_commands(cli, conversion_controller)
    register_simulation_commands(cli, conversion_controller)
    return cli


if __name__ == "__main__":
    create_app()()
