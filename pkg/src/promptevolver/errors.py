"""Exception hierarchy.

The CLI maps the three top-level families to exit codes: configuration
problems exit 2, backend problems exit 3, storage problems exit 4.
"""

from __future__ import annotations


class PromptEvolverError(Exception):
    """Base class for every error raised by this package."""


# -- configuration ----------------------------------------------------------


class ConfigError(PromptEvolverError):
    pass


class MissingField(ConfigError):
    def __init__(self, key: str, message: str | None = None) -> None:
        self.key = key
        super().__init__(message or f"missing required field: {key}")


class OutOfRange(ConfigError):
    def __init__(self, key: str, message: str | None = None) -> None:
        self.key = key
        super().__init__(message or f"value out of range: {key}")


class UnknownScorer(ConfigError):
    def __init__(self, scorer_id: str) -> None:
        self.scorer_id = scorer_id
        super().__init__(f"unknown guidance scorer: {scorer_id!r}")


class UnknownTemplateVariant(ConfigError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown template variant: {name!r}")


class UnknownFormat(ConfigError):
    def __init__(self, fmt: str) -> None:
        self.fmt = fmt
        super().__init__(f"unknown report format: {fmt!r}")


class EmptyGroup(ConfigError):
    """Raised when an aggregation receives no rows."""


class DomainError(PromptEvolverError, ValueError):
    """Arguments outside a mathematical function's domain."""


# -- templates / parsing ----------------------------------------------------


class TemplateError(PromptEvolverError):
    pass


class GroundingImagesMissing(TemplateError):
    pass


class NoPromptsFound(TemplateError):
    pass


class EmptyAfterTruncation(TemplateError):
    pass


# -- backends ---------------------------------------------------------------


class BackendError(PromptEvolverError):
    retryable = False


class Transport(BackendError):
    retryable = True


class RateLimited(BackendError):
    retryable = True


class BadResponse(BackendError):
    pass


class GenerationRefused(BackendError):
    pass


class AttachmentLimitExceeded(BackendError):
    pass


class UnrecognizedTemplate(BackendError):
    pass


# -- engine -----------------------------------------------------------------


class EngineError(PromptEvolverError):
    pass


class InitUnderflow(EngineError):
    pass


class UnevaluatedPopulation(EngineError):
    pass


class UnevaluatedIndividual(EngineError):
    pass


# -- storage ----------------------------------------------------------------


class StorageFailure(PromptEvolverError):
    pass


class RunExists(StorageFailure):
    pass


class GapInSequence(StorageFailure):
    pass


class CorruptManifest(StorageFailure):
    pass


class SchemaMismatch(StorageFailure):
    pass
