"""Exception hierarchy shared by all lmplab modules."""


class LmpLabError(Exception):
    """Base class for every error raised by lmplab."""


class InvalidGrid(LmpLabError, ValueError):
    pass


class InvalidConfig(LmpLabError, ValueError):
    pass


class SingularLaplacian(LmpLabError):
    pass


class WouldDisconnect(LmpLabError):
    pass


class ParseError(LmpLabError, ValueError):
    """Malformed case, dataset, or checkpoint file.

    ``line`` is 1-based when known.
    """

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DimensionMismatch(LmpLabError, ValueError):
    pass


class Infeasible(LmpLabError):
    pass


class NoConvergence(LmpLabError):
    def __init__(self, message, worst_residual=float("nan")):
        self.worst_residual = worst_residual
        super().__init__(message)


class TooLarge(LmpLabError):
    pass


class TooManyInfeasible(LmpLabError):
    pass


class InvalidFractions(LmpLabError, ValueError):
    pass


class SchemaMismatch(LmpLabError):
    pass


class NonFinite(LmpLabError, FloatingPointError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")


class InvalidBlocking(LmpLabError, ValueError):
    pass


class NoValidPerturbation(LmpLabError):
    pass


class IncompatibleTopology(LmpLabError):
    pass
