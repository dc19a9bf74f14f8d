"""Red/yellow alerting and the green documentation ledger.

Red conditions compromise participants or the data (store writes failing, an
unrecognized participant, out-of-range probabilities, unreasonable prompt
counts). Yellow conditions compromise learning but are covered by fallbacks
(sensor fetch problems, store reads). Green items never page; they are written
to the ledger so post-trial analyses can account for them.
"""

from __future__ import annotations

import collections
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol, Sequence

from . import errors
from .policy import LogisticParams
from .scheduler import probability_in_range

RED = "red"
YELLOW = "yellow"

#: Severity for every failure kind the service can raise. Unknown kinds are red.
FAILURE_SEVERITY: dict[str, str] = {
    errors.StoreWriteError.kind: RED,
    errors.StorageFullError.kind: RED,
    errors.UnknownParticipantError.kind: RED,
    errors.ProbabilityRangeError.kind: RED,
    errors.AlertQueueOverflow.kind: RED,
    errors.SensorTimeout.kind: YELLOW,
    errors.RateLimitedEmpty.kind: YELLOW,
    errors.MalformedPayload.kind: YELLOW,
    errors.StoreReadError.kind: YELLOW,
    errors.DataUnavailableError.kind: YELLOW,
    errors.NumericalFailure.kind: YELLOW,
    errors.SensorFailure.kind: YELLOW,
    errors.StoreError.kind: RED,
    errors.InvalidInputError.kind: RED,
    errors.TrialFidelityError.kind: RED,
}

LEDGER_CATEGORIES = (
    "update_success",
    "update_failure",
    "api_call_failed",
    "blank_schedule",
    "affected_decision_times",
    "code_change",
    "other",
)


@dataclass
class Alert:
    severity: str
    check_id: str
    timestamp: int
    participant_id: Optional[int] = None
    detail: dict = field(default_factory=dict)
    delivered: bool = False
    fault_id: Optional[str] = None

    def mark_delivered(self) -> None:
        if self.delivered:
            raise RuntimeError("alert already acknowledged")
        self.delivered = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LedgerEntry:
    category: str
    timestamp: int
    payload: dict = field(default_factory=dict)
    fault_id: Optional[str] = None

    def __post_init__(self):
        if self.category not in LEDGER_CATEGORIES:
            raise ValueError(f"unknown ledger category {self.category!r}")


@dataclass(frozen=True)
class PromptThresholds:
    min_weekly: int = 1
    max_weekly: int = 12

    def __post_init__(self):
        if not 0 <= self.min_weekly < self.max_weekly <= 14:
            raise errors.ConfigError("need 0 <= min_weekly < max_weekly <= 14")


class AlertSink(Protocol):
    def deliver(self, alert: Alert) -> bool: ...


class MemorySink:
    def __init__(self):
        self.received: list[Alert] = []

    def deliver(self, alert: Alert) -> bool:
        self.received.append(alert)
        return True


class FileSink:
    """Appends one JSON line per alert."""

    def __init__(self, path):
        self.path = Path(path)

    def deliver(self, alert: Alert) -> bool:
        with self.path.open("a") as fh:
            fh.write(json.dumps(alert.to_dict(), sort_keys=True) + "\n")
        return True


# ---------------------------------------------------------------- checks


def check_prompt_count(
    participant_id,
    window: Optional[Sequence[int]],
    thresholds: PromptThresholds,
    timestamp: int = 0,
) -> Optional[Alert]:
    """Red alert when the prompts sent over the past 7 days leave ``[min, max]``.

    ``window`` holds the served actions of the last 14 decision times, or
    ``None`` if they could not be read, which is reported as yellow.
    """
    if window is None:
        return Alert(YELLOW, "prompt_history_unavailable", timestamp, participant_id)
    count = int(sum(window))
    if count < thresholds.min_weekly or count > thresholds.max_weekly:
        return Alert(
            RED, "prompt_count", timestamp, participant_id,
            {"count": count, "min_weekly": thresholds.min_weekly,
             "max_weekly": thresholds.max_weekly, "window": len(window)},
        )
    return None


def check_probability_range(
    pi: float, state_kind: str, params: LogisticParams, timestamp: int = 0, participant_id=None
) -> Optional[Alert]:
    if probability_in_range(pi, state_kind, params):
        return None
    return Alert(
        RED, "probability_out_of_range", timestamp, participant_id,
        {"pi": pi, "state_kind": state_kind, "l_min": params.l_min, "l_max": params.l_max},
    )


def classify_failure(
    failure: BaseException | str, participant_id=None, timestamp: int = 0
) -> Alert:
    kind = failure if isinstance(failure, str) else getattr(failure, "kind", "unclassified")
    severity = FAILURE_SEVERITY.get(kind, RED)
    detail: dict[str, Any] = {"kind": kind}
    fault_id = None
    if isinstance(failure, BaseException):
        detail["message"] = str(failure)
        detail.update(getattr(failure, "detail", {}) or {})
        fault_id = getattr(failure, "fault_id", None)
    return Alert(severity, kind, timestamp, participant_id, _jsonable(detail), fault_id=fault_id)


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))


# ---------------------------------------------------------------- emission


class Ledger:
    def __init__(self, write_hook=None):
        self.entries: list[LedgerEntry] = []
        self._write_hook = write_hook
        self._lock = threading.Lock()

    def record(self, entry: LedgerEntry) -> int:
        with self._lock:
            if self._write_hook is not None:
                self._write_hook(entry)
            self.entries.append(entry)
            return len(self.entries) - 1

    def export(self, span: tuple[int, int] | None = None) -> dict:
        return export_ledger(self.entries, span)


def export_ledger(entries: Iterable[LedgerEntry], span: tuple[int, int] | None = None) -> dict:
    """Post-trial documentation bundle for entries with ``span[0] <= timestamp < span[1]``."""
    selected = [
        e for e in entries if span is None or span[0] <= e.timestamp < span[1]
    ]
    if not selected:
        return {}
    doc: dict[str, list] = {
        "update_timeline": [],
        "api_call_failures": [],
        "blank_schedule_incidents": [],
        "affected_decision_times": [],
        "code_changes": [],
        "other": [],
    }
    section = {
        "update_success": "update_timeline",
        "update_failure": "update_timeline",
        "api_call_failed": "api_call_failures",
        "blank_schedule": "blank_schedule_incidents",
        "affected_decision_times": "affected_decision_times",
        "code_change": "code_changes",
        "other": "other",
    }
    for e in selected:
        item = {"category": e.category, "timestamp": e.timestamp, "payload": e.payload}
        if e.fault_id is not None:
            item["fault_id"] = e.fault_id
        doc[section[e.category]].append(item)
    return doc


class Monitor:
    """Routes alerts to sinks and keeps the green ledger.

    Alerts go through a bounded queue that is flushed on every emit, so
    delivery happens in the same step the condition is detected. A sink that
    refuses leaves the alert queued for the next flush. Every alert stays in
    ``alerts``; when the queue is full the new alert is not queued for
    delivery and the overflow is recorded as its own red alert.
    """

    def __init__(self, sinks: Sequence[AlertSink] | None = None, queue_size: int = 10_000,
                 ledger: Ledger | None = None, on_alert=None):
        self.sinks = list(sinks) if sinks is not None else [MemorySink()]
        self.ledger = ledger if ledger is not None else Ledger()
        self.alerts: list[Alert] = []
        self.overflow_count = 0
        self._queue: collections.deque[Alert] = collections.deque()
        self._queue_size = queue_size
        self._on_alert = on_alert
        self._lock = threading.RLock()

    def emit(self, alert: Alert) -> Alert:
        with self._lock:
            self.alerts.append(alert)
            if len(self._queue) >= self._queue_size:
                self.overflow_count += 1
                overflow = Alert(RED, errors.AlertQueueOverflow.kind, alert.timestamp,
                                 alert.participant_id, {"undelivered_check": alert.check_id})
                self.alerts.append(overflow)
            else:
                self._queue.append(alert)
            if self._on_alert is not None:
                self._on_alert(alert)
            self.flush()
        return alert

    def flush(self) -> None:
        with self._lock:
            while self._queue:
                alert = self._queue[0]
                try:
                    acked = all(sink.deliver(alert) for sink in self.sinks)
                except Exception:
                    acked = False
                if not acked:
                    return
                self._queue.popleft()
                alert.mark_delivered()

    def record_ledger(self, entry: LedgerEntry) -> int | None:
        try:
            return self.ledger.record(entry)
        except errors.StoreError as exc:
            escalated = classify_failure(exc, timestamp=entry.timestamp)
            escalated.severity = RED
            self.emit(escalated)
            return None

    def count_by_severity(self) -> dict[str, int]:
        counts = {RED: 0, YELLOW: 0}
        for a in self.alerts:
            counts[a.severity] = counts.get(a.severity, 0) + 1
        return counts
