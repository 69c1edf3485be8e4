"""Exception types shared across the package."""


class IsoRagError(Exception):
    """Base class for all errors raised by this package."""


class InvalidOmegaError(IsoRagError, ValueError):
    """Group size outside [1, k]."""


class NoBenignGroupsError(IsoRagError):
    """Every enumerated corruption case wipes out all benign groups."""


class BudgetExceededError(IsoRagError):
    """An exhaustive enumeration would exceed the configured work budget."""


class NoRuleMatchedError(IsoRagError):
    """The mock backend received a prompt no rule matches (table misconfiguration)."""


class BackendUnavailableError(IsoRagError):
    """A remote backend could not be reached; the call is retryable."""


class CapabilityUnsupportedError(IsoRagError):
    """The backend cannot serve the requested call mode (e.g. exact distributions)."""


class NoVotesError(IsoRagError):
    """Every isolated prediction abstained or failed to match a choice."""


class InvalidTargetError(IsoRagError, ValueError):
    """Attack payload text is empty."""


class DatasetParseError(IsoRagError, ValueError):
    """A dataset or attack-spec file does not match the expected schema."""
