# routes/route_helpers.py
# Shared command-line plumbing: failure exits and list options

from typing import Dict, List

import click


def exit_on_failure(result: Dict) -> Dict:
    """Print the controller error on stderr and exit with its code; pass successful results through."""
    if not result.get("success"):
        click.echo(f"error: {result.get('error', 'unknown failure')}", err=True)
        click.get_current_context().exit(result.get("exit_code", 1))
    return result


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of integers, got {text!r}")
