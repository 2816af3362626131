from . import hashing, strings
from .hashing import *
from .strings import *
