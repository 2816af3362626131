import importlib.metadata
import pathlib
from typing import Optional

import toml


def __get_version() -> Optional[str]:
    path = pathlib.Path(__file__).resolve().parents[1] / 'pyproject.toml'

    if path.exists():
        pyproject = toml.loads(path.read_text())
        return pyproject['tool']['poetry']['version']
    else:
        try:
            return importlib.metadata.version("spdelab")
        except importlib.metadata.PackageNotFoundError:
            pass

    return None

__version__ = __get_version() or "0.0.0"

# Add the devtools debug() function to builtins if available
import builtins

import devtools

builtins.debug = devtools.debug

# Promote all symbols from submodules to the top-level package
from .checks import *
from .coefficients import *
from .configuration import *
from .errors import *
from .experiments import *
from .kernels import *
from .lattice import *
from .logging import *
from .noise import *
from .rate_fn import *
from .reports import *
from .solver import *
from .types import *
from .utilities import *
