import logging
import sys
from collections.abc import Sequence

import click
import typer

from persona_fusion.cli import app

logger = logging.getLogger(__name__)

PROG_NAME = "persona-fusion"


def run_cli(argv: Sequence[str]) -> int:
    """Run one command and map its outcome to an exit code.

    Returns:
        0 on success, 2 on a usage error, 1 on a runtime error
    """
    command = typer.main.get_command(app)
    try:
        result = command.main(args=list(argv), prog_name=PROG_NAME, standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except Exception as e:
        logger.error(f"Error running {PROG_NAME}: {str(e)}")
        return 1
    return result if isinstance(result, int) else 0


def main():
    """Run the persona-fusion command line."""
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
