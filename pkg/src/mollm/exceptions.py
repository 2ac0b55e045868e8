"""Exception and warning types raised by the package."""


class ValidationError(ValueError):
    """Input failed a shape, range or finiteness check."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses or parameters.

    ``record`` is the last diagnostic record, ``params`` the last finite
    parameters and ``records`` every record up to the failure, when known.
    """

    def __init__(self, message, record=None, params=None, records=None):
        super().__init__(message)
        self.record = record
        self.params = params
        self.records = records


class DivergenceWarning(RuntimeWarning):
    """A loss hit a log(0) and returned the +inf sentinel."""
