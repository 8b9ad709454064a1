"""Exception types shared across the package.

Validation problems (bad files, shape mismatches, broken invariants) and
numerical failures (overflow, divergence) are kept distinct so the CLI can
map them to different exit codes.
"""


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class NumericalError(ArithmeticError):
    """A computation diverged or overflowed.

    Carries optional context about where the failure happened so fitting
    loops can report the offending record and time.
    """

    def __init__(self, message, record_id=None, time=None):
        if record_id is not None:
            message = f"{message} (record={record_id}" + (
                f", t={time:.6g})" if time is not None else ")"
            )
        super().__init__(message)
        self.record_id = record_id
        self.time = time
