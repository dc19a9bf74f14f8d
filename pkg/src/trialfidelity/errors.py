"""Exception hierarchy shared by the service, scheduler and monitoring code.

Every failure the service can produce has a stable ``kind`` string. The
monitoring layer maps kinds to alert severities, so adding a new subclass here
means adding a row to :data:`trialfidelity.monitoring.FAILURE_SEVERITY`.
"""

from __future__ import annotations


class TrialFidelityError(Exception):
    """Base class. ``fault_id`` is set when the failure was injected by a test harness."""

    kind = "unclassified"

    def __init__(self, message: str = "", *, fault_id: str | None = None, **detail):
        super().__init__(message or self.kind)
        self.fault_id = fault_id
        self.detail = detail


class InvalidInputError(TrialFidelityError, ValueError):
    kind = "invalid_input"


class ConfigError(TrialFidelityError, ValueError):
    kind = "config_error"


class NumericalFailure(TrialFidelityError, ArithmeticError):
    kind = "numerical_failure"


class ProbabilityRangeError(TrialFidelityError):
    """A probability outside its permitted range was about to be used for sampling."""

    kind = "probability_out_of_range"


class DataUnavailableError(TrialFidelityError):
    kind = "data_unavailable"


class UnknownParticipantError(TrialFidelityError, KeyError):
    kind = "unknown_participant"


class SensorFailure(TrialFidelityError):
    kind = "sensor_failure"


class SensorTimeout(SensorFailure):
    kind = "sensor_timeout"


class RateLimitedEmpty(SensorFailure):
    """The upstream returned an empty body, typically after a request-rate limit was hit."""

    kind = "rate_limited_empty"


class MalformedPayload(SensorFailure):
    kind = "malformed_payload"


class StoreError(TrialFidelityError):
    kind = "store_error"


class StoreWriteError(StoreError):
    kind = "store_write_failed"


class StorageFullError(StoreWriteError):
    kind = "storage_full"


class StoreReadError(StoreError):
    kind = "store_read_failed"


class AlertQueueOverflow(TrialFidelityError):
    kind = "alert_queue_overflow"


class ReplayMismatch(TrialFidelityError):
    """Replay disagreed with the log. ``seq`` names the first divergent record."""

    kind = "replay_mismatch"

    def __init__(self, seq: int, message: str = ""):
        super().__init__(message or f"replay diverged at seq {seq}")
        self.seq = seq
