"""Exception types. Each maps onto a CLI exit code."""


class MisregError(Exception):
    exit_code = 1


class InputError(MisregError, ValueError):
    exit_code = 4


class DegenerateGeometryError(InputError):
    pass


class EmptyMaskError(InputError):
    pass


class NoOverlapError(MisregError):
    pass


class DegenerateFitError(MisregError):
    pass


class InstabilityError(MisregError):
    exit_code = 3

    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message)
        self.frame = frame


class NonConvergenceError(MisregError):
    exit_code = 2
