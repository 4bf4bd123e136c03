"""Exception hierarchy shared across the package."""


class FlakiDockError(Exception):
    """Base class for everything raised deliberately by this package."""


# --- build-definition parsing ---

class MalformedEncoding(FlakiDockError):
    """Input bytes are not valid UTF-8 (after an optional BOM)."""


class EmptyDocument(FlakiDockError):
    """The build definition contains no instructions at all."""


# --- build engine ---

class EngineError(FlakiDockError):
    """Driver-level failure (daemon unreachable, disk full, ...).

    Distinct from an ordinary build failure, which is reported through a
    BuildRecord status. Carries the partial record/records when available.
    """

    def __init__(self, message: str, record=None, records=None):
        super().__init__(message)
        self.record = record
        self.records = records or []


# --- log preprocessing ---

class InvalidRule(FlakiDockError):
    """A rule file entry could not be parsed or compiled."""


# --- providers ---

class ProviderUnavailable(FlakiDockError):
    """The remote embedding/generation service could not be reached or errored."""


class TokenLimit(FlakiDockError):
    """Input exceeds the provider token limit and truncation was disabled."""


# --- vector math ---

class DimensionMismatch(FlakiDockError):
    """Two vectors of different dimensionality were combined."""


class ZeroVector(FlakiDockError):
    """An all-zero embedding was produced or supplied; similarity is undefined."""


# --- demonstration store ---

class StoreError(FlakiDockError):
    """Base class for demonstration-store problems."""


class SchemaViolation(StoreError):
    """A record breaks the store schema; names the offending record and field."""

    def __init__(self, record_id: str, field: str, message: str):
        super().__init__(f"record {record_id!r}, field {field!r}: {message}")
        self.record_id = record_id
        self.field = field


class VersionMismatch(StoreError):
    """The store file declares an unsupported schema version."""


# --- repair pipeline ---

class UnparseableResponse(FlakiDockError):
    """Generator output yielded no usable build definition."""


class BudgetExhausted(FlakiDockError):
    """Even the bare query does not fit the prompt token budget."""


# --- configuration ---

class ConfigError(FlakiDockError):
    """A configuration file or value is invalid."""
