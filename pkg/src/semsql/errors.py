"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SemSqlError(Exception):
    """Base class for every error raised by semsql."""


# -- database access -------------------------------------------------------

class DatabaseNotFound(SemSqlError, FileNotFoundError):
    pass


class NotADatabase(SemSqlError):
    pass


class EmptySchema(SemSqlError):
    pass


class SchemaInvariantError(SemSqlError, ValueError):
    pass


class QueryFailure(SemSqlError):
    pass


# -- LLM gateway -----------------------------------------------------------

class LLMError(SemSqlError):
    pass


class LLMTimeout(LLMError, TimeoutError):
    pass


class AuthFailure(LLMError):
    pass


class RateLimited(LLMError):
    pass


class TransportError(LLMError):
    """Retryable failure talking to the provider (connection reset, 5xx)."""


class MalformedResponse(LLMError):
    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class ScriptMiss(LLMError):
    """The scripted provider has no response for a request fingerprint."""

    def __init__(self, fingerprint: str, preview: str = ""):
        super().__init__(f"no scripted response for fingerprint {fingerprint}: {preview!r}")
        self.fingerprint = fingerprint


# -- knowledge base --------------------------------------------------------

class MissingPriorLayer(SemSqlError):
    pass


class ValidationFailure(SemSqlError, ValueError):
    pass


class UnknownErrorType(SemSqlError, ValueError):
    pass


class EmptyEvidence(SemSqlError):
    pass


# -- SQL analysis ----------------------------------------------------------

class SqlParseError(SemSqlError, ValueError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        where = f" (line {line}, col {col})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.col = col


class UnsupportedDialect(SemSqlError, ValueError):
    pass


# -- synthesis / verification ---------------------------------------------

class ConstraintViolation(SemSqlError, ValueError):
    pass


class NonSelectOutput(SemSqlError, ValueError):
    pass


class EmptyVocabulary(SemSqlError, ValueError):
    pass


class Uncorrectable(SemSqlError):
    pass


class TooFewSamples(SemSqlError, ValueError):
    pass


# -- pipeline --------------------------------------------------------------

class ConfigInvalid(SemSqlError, ValueError):
    pass


class StageFailed(SemSqlError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class IoFailure(SemSqlError, OSError):
    pass
