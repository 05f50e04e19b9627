"""Numerical laboratory for fully coupled forward-backward SDEs.

Decoupling-field solver, Monte Carlo checks of L^p and stability estimates,
and linear-quadratic control through the Hamiltonian FBSDE.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: E402,F401,F403
from .model import CoefficientSet, FBSDEProblem, affine_problem, probe_assumptions  # noqa: E402
from .solver import (DecouplingField, SolverParams, SpatialGrid,  # noqa: E402
                     build_decoupling_field, solve_global)
from .stochastic import BrownianEnsemble, TimeGrid, build_grid, sample_brownian  # noqa: E402

__all__ = ["CoefficientSet", "FBSDEProblem", "affine_problem", "probe_assumptions",
           "DecouplingField", "SolverParams", "SpatialGrid", "build_decoupling_field",
           "solve_global", "BrownianEnsemble", "TimeGrid", "build_grid", "sample_brownian"]
