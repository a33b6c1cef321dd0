"""Hard-sphere particles in a ball with stochastic collisions and wall reflections.

Submodules:

* ``geometry``: ball domain, hit times, overlap windows, hemisphere quadrature.
* ``kernels``: collision, reflection, timing and initial densities.
* ``simulator``: event engine and parallel ensembles with reproducible seeds.
* ``reduced``: reduced coordinates, directional flows and event-order classes.
* ``calculus``: weights, pathwise derivatives and duality building blocks.
* ``density``: class-restricted weights, KDE tables and a single-particle oracle.
* ``verify``: the verification suites behind ``pdmpkit verify``.
* ``cli``: command line entry point.
"""

from .config import ModelConfig, RunConfig, config_hash, load_config
from .errors import PdmpError
from .simulator import run_ensemble, simulate_index

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "PdmpError", "config_hash", "load_config", "run_ensemble", "simulate_index", "__version__"]
