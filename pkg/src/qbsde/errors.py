"""Exception hierarchy shared by all engines."""


class QBSDEError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(QBSDEError, ValueError):
    pass


class NonConvergence(QBSDEError):
    pass


class Blowup(QBSDEError):
    pass


class DomainTooSmall(QBSDEError):
    pass


class OutOfDomain(QBSDEError, ValueError):
    pass


class MonotoneViolation(QBSDEError):
    pass


class GridEscape(QBSDEError):
    pass


class OverflowGuard(QBSDEError, OverflowError):
    pass


class DomainMismatch(QBSDEError, ValueError):
    pass


class VariantMismatch(QBSDEError, TypeError):
    pass


class EndpointViolation(QBSDEError, ValueError):
    pass


class BracketFailure(QBSDEError):
    pass


class ClosedFormUnavailable(QBSDEError, NotImplementedError):
    pass


class AuditFailure(QBSDEError, ValueError):
    """A generator failed a precondition audit (e.g. g(t, y, 0) = 0)."""
