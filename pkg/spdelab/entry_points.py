# Entry points for executing functionality defined in other modules
# Do not implement meaningful functionality here. Instead import and
# dispatch the intent into focused modules to do the real work.
# noqa

import dotenv

import spdelab
import spdelab.cli


def run_cli() -> None:
    """Run the spdelab CLI."""
    dotenv.load_dotenv(dotenv.find_dotenv(usecwd=True))

    cli = spdelab.cli.LabCLI()
    cli()
