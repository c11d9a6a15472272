"""Exception hierarchy shared by all modules."""


class RDSError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RDSError, ValueError):
    """Experiment configuration failed schema or semantic validation."""


class NumericalError(RDSError):
    """A numerical routine could not produce a trustworthy result."""


class NotStochastic(RDSError, ValueError):
    pass


class ZeroMassState(RDSError, ValueError):
    pass


class NotIrreducible(RDSError, ValueError):
    pass


class NotBernoulli(RDSError, ValueError):
    pass


class PhaseSpaceMismatch(RDSError, ValueError):
    pass


class MarginalMismatch(RDSError, ValueError):
    pass


class NonMonotoneWithoutFallback(RDSError, ValueError):
    pass


class DomainViolation(NumericalError):
    """A fiber map sent a point outside an interval phase space."""


class DerivativeUnderflow(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass
