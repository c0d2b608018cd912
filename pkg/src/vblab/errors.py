"""Exception types raised by the library."""


class EnumerationBudgetError(ValueError):
    """Exact enumeration was requested but is not available or affordable."""


class NonFiniteError(FloatingPointError):
    """A non-finite intermediate appeared; the message names the coordinate."""


class NewtonError(RuntimeError):
    """Damped Newton failed to produce an ascent step within the halving budget."""


class GridCoverageError(ValueError):
    """A density grid leaves too much probability mass on its boundary."""


class DegenerateDataError(ValueError):
    """The dataset does not identify the parameter (e.g. all counts zero)."""


class EssTooLowError(RuntimeError):
    """Chain effective sample size below the acceptable floor."""


class MonteCarloError(RuntimeError):
    """Monte Carlo standard error too large for the requested estimate."""


class SingularCurvatureError(RuntimeError):
    """An estimated information matrix is singular or near singular."""
