"""Exception types shared across the package."""


class PhySSMError(Exception):
    """Base class for package errors."""


class ConfigurationError(PhySSMError):
    """Invalid user-supplied configuration (bad flag, unknown system, ...)."""


class IntegrationDivergedError(PhySSMError):
    """Ground-truth integrator produced a non-finite state."""


class DisjointSupportError(PhySSMError):
    """A knowledge mask overlaps the support of the known dynamics matrix."""


class DiscretizationSingularError(PhySSMError):
    """(I - delta/2 * A) was singular during bilinear discretization."""


class TrainingDivergedError(PhySSMError):
    """Training loss became non-finite."""
