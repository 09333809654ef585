"""Exception hierarchy shared by every ranet module."""


class RANetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RANetError):
    """Invalid architecture or layer configuration.

    ``violations`` holds ``(field, constraint)`` pairs when several problems
    are reported together.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class DataError(RANetError):
    """Input data does not match what an operation expects."""


class FormatError(DataError):
    """A file on disk does not follow the expected binary layout."""


class UsageError(RANetError):
    """An API was called outside its contract (bad index, non-scalar loss...)."""


class DegenerateBatchError(RANetError):
    """Batch statistics cannot be computed from fewer than two values."""


class InfeasibleBudgetError(RANetError):
    """Requested budget is below the cheapest possible exit."""

    def __init__(self, budget, minimum):
        super().__init__(
            f"budget {budget:g} MACs is infeasible; minimum achievable cost is {minimum:g} MACs"
        )
        self.budget = budget
        self.minimum = minimum


class TrainingDivergedError(RANetError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
