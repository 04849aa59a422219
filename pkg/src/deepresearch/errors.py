"""Exception taxonomy shared across the package."""


class DeepResearchError(Exception):
    """Base class for all package errors."""


class InvalidRequestError(DeepResearchError):
    """A chat request violates its invariants."""


class TransientTransportError(DeepResearchError):
    """A transport failure that is worth retrying."""


class TransportExhaustedError(DeepResearchError):
    """All transport attempts failed."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ScriptMissError(DeepResearchError):
    """A strict scripted backend had no entry for the request."""


class MalformedResponseError(DeepResearchError):
    """A wire payload could not be parsed."""


class UnresolvableImageError(DeepResearchError):
    """An image reference could not be resolved to bytes."""


class EmbeddingError(DeepResearchError):
    """Text could not be embedded."""


class EmptyIndexError(DeepResearchError):
    """Search was attempted against an empty corpus index."""


class UnknownUnitError(DeepResearchError):
    """A memory unit id does not exist in the store."""


class MissingLogProbError(DeepResearchError):
    """A policy token lacks a log-probability required for evaluation."""


class ZeroPolicyTokensError(DeepResearchError):
    """A trajectory carries no policy tokens, so the masked mean is undefined."""


class ExportError(DeepResearchError):
    """Training-signal export could not be produced."""


class ConfigError(DeepResearchError):
    """A run configuration is invalid (user error)."""


class StoreLockedError(DeepResearchError):
    """Another invocation holds the advisory lock for a store path."""
