"""Multilevel local-dependence CLT toolkit.

Verification library and experiment runner for quantitative normal
approximation of lattice sums with multilevel local dependence: exact
Gaussian calculus, mollified Stein-equation solutions with certified
derivative bounds, Wasserstein distance estimators, dependence-structure
combinatorics, synthetic random-field generators, concentration
inequalities, and a reproducible Monte Carlo CLI.
"""

from ._util import QuadratureError, UsageError

__version__ = "0.1.0"

__all__ = ["QuadratureError", "UsageError", "__version__"]
