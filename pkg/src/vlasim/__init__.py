from .errors import *
from .kernels import *
from .densities import *
from .dynamics import *
from .meanfield import *
from .chaos import *
from .monitors import *
from .experiments import *
from .util import *

try:
    from ._version import version as __version__
except ImportError:
    # Package not installed
    __version__ = "unknown"
