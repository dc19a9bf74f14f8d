"""The RL service: action-selection and update endpoints over an append-only log.

Everything needed to reproduce a served action (states, probabilities, seeds,
policy versions, posterior snapshots, the link and quadrature settings) is
written to the log, so :func:`replay` needs nothing but the log itself.
"""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InvalidInputError,
    MalformedPayload,
    NumericalFailure,
    RateLimitedEmpty,
    ReplayMismatch,
    SensorFailure,
    StorageFullError,
    StoreError,
    StoreReadError,
    StoreWriteError,
    TrialFidelityError,
    UnknownParticipantError,
)
from .model_core import (
    N_FEATURES,
    PosteriorState,
    PriorSpec,
    StateVector,
    marginal_advantage_posterior,
    posterior_from_arrays,
)
from .monitoring import (
    Alert,
    LedgerEntry,
    Monitor,
    PromptThresholds,
    check_prompt_count,
    classify_failure,
)
from .policy import (
    DEFAULT_QUAD_NODES,
    DecisionOutcome,
    LogisticParams,
    action_selection_prob,
    sample_actions,
)
from .scheduler import (
    FALLBACK_UNIFORM,
    FIXED_PI,
    SCHEDULE_LENGTH,
    STANDARD,
    ActionSchedule,
    build_full_schedule,
    fallback_uniform_schedule,
    state_kind_for_offset,
)
from .seeding import derive_seed, entry_seeds
from .state_reward import (
    WINDOW,
    CostParams,
    SensorWindow,
    build_state,
    is_cold_start,
    reward_for,
)

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
DECISION_MINUTES = (8 * 60, 20 * 60)  # morning, evening
UPDATE_WEEKDAY = 0  # day 0 of the simulated calendar is a Sunday

EVENT_KINDS = (
    "decision_point",
    "schedule_built",
    "schedule_pushed",
    "fallback_invoked",
    "sensor_fetch",
    "reward_constructed",
    "policy_update_succeeded",
    "policy_update_skipped",
    "api_call",
    "alert",
    "ledger",
)
SCHEDULE_KINDS = ("schedule_built", "fallback_invoked")


def decision_ts(step: int) -> int:
    """Simulated minute of global decision step ``step`` (two per day)."""
    return (step // 2) * MINUTES_PER_DAY + DECISION_MINUTES[step % 2]


def is_update_day(day: int) -> bool:
    return day % 7 == UPDATE_WEEKDAY


# ---------------------------------------------------------------- config


def _reject_unknown(data: dict, allowed: Iterable[str], where: str) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class RateLimitConfig:
    requests_per_minute: int = 60
    pacing: bool = True

    def __post_init__(self):
        if self.requests_per_minute < 1:
            raise ConfigError("requests_per_minute must be positive")


@dataclass(frozen=True)
class RetryConfig:
    max_attempts: int = 1
    backoff_minutes: int = 1

    def __post_init__(self):
        if self.max_attempts < 1 or self.backoff_minutes < 1:
            raise ConfigError("max_attempts and backoff_minutes must be positive")


@dataclass(frozen=True)
class ServiceConfig:
    prior: PriorSpec = field(default_factory=PriorSpec.default)
    logistic: LogisticParams = field(default_factory=LogisticParams)
    cost: CostParams = field(default_factory=CostParams)
    quad_nodes: int = DEFAULT_QUAD_NODES
    thresholds: PromptThresholds = field(default_factory=PromptThresholds)
    rate_limit: RateLimitConfig = field(default_factory=RateLimitConfig)
    retry: RetryConfig = field(default_factory=RetryConfig)
    trial_seed: int = 0

    def __post_init__(self):
        if self.quad_nodes < 1:
            raise ConfigError("quadrature nodes must be at least 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ServiceConfig":
        _reject_unknown(
            data,
            ("prior", "logistic", "cost", "quadrature", "thresholds", "rate_limit", "retry",
             "trial_seed"),
            "config",
        )
        try:
            return cls(
                prior=_prior_from_dict(data.get("prior", {})),
                logistic=_sub(LogisticParams, data.get("logistic", {}), "logistic"),
                cost=_sub(CostParams, data.get("cost", {}), "cost"),
                quad_nodes=int(_quadrature(data.get("quadrature", {}))),
                thresholds=_sub(PromptThresholds, data.get("thresholds", {}), "thresholds"),
                rate_limit=_sub(RateLimitConfig, data.get("rate_limit", {}), "rate_limit"),
                retry=_sub(RetryConfig, data.get("retry", {}), "retry"),
                trial_seed=int(data.get("trial_seed", 0)),
            )
        except ConfigError:
            raise
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ServiceConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        p = self.prior
        return {
            "prior": {
                "noise_var": p.noise_var,
                "mu_alpha0": p.mu_alpha0.tolist(), "sigma_alpha0": p.sigma_alpha0.tolist(),
                "mu_alpha1": p.mu_alpha1.tolist(), "sigma_alpha1": p.sigma_alpha1.tolist(),
                "mu_beta": p.mu_beta.tolist(), "sigma_beta": p.sigma_beta.tolist(),
            },
            "logistic": dataclasses.asdict(self.logistic),
            "cost": dataclasses.asdict(self.cost),
            "quadrature": {"nodes": self.quad_nodes},
            "thresholds": dataclasses.asdict(self.thresholds),
            "rate_limit": dataclasses.asdict(self.rate_limit),
            "retry": dataclasses.asdict(self.retry),
            "trial_seed": self.trial_seed,
        }


def _sub(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    _reject_unknown(data, [f.name for f in dataclasses.fields(cls)], where)
    return cls(**data)


def _quadrature(data: dict) -> int:
    if not isinstance(data, dict):
        raise ConfigError("quadrature must be an object")
    _reject_unknown(data, ("nodes",), "quadrature")
    return data.get("nodes", DEFAULT_QUAD_NODES)


def _prior_from_dict(data: dict) -> PriorSpec:
    if not isinstance(data, dict):
        raise ConfigError("prior must be an object")
    keys = ("prior_scale", "noise_var", "mu_alpha0", "sigma_alpha0", "mu_alpha1",
            "sigma_alpha1", "mu_beta", "sigma_beta")
    _reject_unknown(data, keys, "prior")
    scale = float(data.get("prior_scale", 1.0))
    if not scale > 0:
        raise ConfigError("prior_scale must be positive")
    zero = [0.0] * N_FEATURES
    eye = (scale * np.eye(N_FEATURES)).tolist()
    mu_beta = data.get("mu_beta", zero)
    sigma_beta = data.get("sigma_beta", eye)
    return PriorSpec(
        np.array(data.get("mu_alpha0", zero), dtype=float),
        np.array(data.get("sigma_alpha0", eye), dtype=float),
        # the advantage prior doubles as the default for the pi-interaction block
        np.array(data.get("mu_alpha1", mu_beta), dtype=float),
        np.array(data.get("sigma_alpha1", sigma_beta), dtype=float),
        np.array(mu_beta, dtype=float),
        np.array(sigma_beta, dtype=float),
        float(data.get("noise_var", 1.0)),
    )


# ---------------------------------------------------------------- event store


@dataclass(frozen=True)
class EventRecord:
    seq: int
    ts: int
    participant_id: Optional[int]
    kind: str
    payload: dict
    policy_version: Optional[str]

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq, "ts": self.ts, "participant_id": self.participant_id,
                "kind": self.kind, "payload": self.payload, "policy_version": self.policy_version,
            },
            sort_keys=True, separators=(",", ":"), allow_nan=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        d = json.loads(line)
        if set(d) != {"seq", "ts", "participant_id", "kind", "payload", "policy_version"}:
            raise ValueError(f"bad event fields: {sorted(d)}")
        if d["kind"] not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {d['kind']!r}")
        return cls(int(d["seq"]), int(d["ts"]), d["participant_id"], d["kind"], d["payload"],
                   d["policy_version"])


class StoreFaultHook(Protocol):
    def on_write(self, kind: str, participant_id) -> None: ...
    def on_read(self, participant_id, kinds) -> None: ...


class EventStore:
    """Append-only, single-writer event log, optionally mirrored to a JSON-lines file.

    ``fault_hook`` lets a harness make individual reads or writes fail; it
    raises and the store leaves its contents untouched.
    """

    def __init__(self, path=None, *, capacity: int | None = None,
                 fault_hook: StoreFaultHook | None = None):
        self.path = Path(path) if path is not None else None
        self.capacity = capacity
        self.fault_hook = fault_hook
        self._records: list[EventRecord] = []
        self._by_participant: dict[Any, list[int]] = collections.defaultdict(list)
        self._by_kind: dict[str, list[int]] = collections.defaultdict(list)
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w")

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[EventRecord]:
        return list(self._records)

    def append_event(self, ts: int, participant_id, kind: str, payload: dict,
                     policy_version: Optional[str]) -> int:
        if kind not in EVENT_KINDS:
            raise InvalidInputError(f"unknown event kind {kind!r}")
        with self._lock:
            if self.fault_hook is not None:
                self.fault_hook.on_write(kind, participant_id)
            if self.capacity is not None and len(self._records) >= self.capacity:
                raise StorageFullError(f"store capacity {self.capacity} reached")
            seq = len(self._records)
            record = EventRecord(seq, int(ts), participant_id, kind, payload, policy_version)
            line = record.to_json()
            if self._fh is not None:
                try:
                    self._fh.write(line + "\n")
                    self._fh.flush()
                except OSError as exc:
                    raise StoreWriteError(str(exc)) from exc
            self._records.append(record)
            self._by_participant[participant_id].append(seq)
            self._by_kind[kind].append(seq)
            return seq

    def read_log(self, participant_id=None, kinds: Sequence[str] | None = None,
                 last: int | None = None) -> list[EventRecord]:
        """Records in seq order, filtered by participant (``None`` = all) and kind.

        ``last`` keeps only the final n matches.
        """
        if self.fault_hook is not None:
            self.fault_hook.on_read(participant_id, kinds)
        if participant_id is None:
            if kinds is None:
                idx = range(len(self._records))
            else:
                idx = sorted(i for k in kinds for i in self._by_kind.get(k, ()))
        else:
            idx = self._by_participant.get(participant_id, [])
            if kinds is not None:
                kinds = set(kinds)
                idx = [i for i in idx if self._records[i].kind in kinds]
        idx = list(idx)
        if last is not None:
            idx = idx[-last:] if last > 0 else []
        return [self._records[i] for i in idx]

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def dump(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self._records:
                fh.write(r.to_json() + "\n")

    @staticmethod
    def load(path) -> list[EventRecord]:
        out = []
        try:
            with Path(path).open() as fh:
                for n, line in enumerate(fh):
                    if line.strip():
                        out.append(EventRecord.from_json(line))
        except OSError as exc:
            raise StoreReadError(f"cannot read log {path}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreReadError(f"corrupt log {path} at line {n + 1}: {exc}") from exc
        return out


# ---------------------------------------------------------------- sensor data


class SensorSource(Protocol):
    """Upstream that serves raw sensor payloads (the main controller in production).

    ``span`` is a half-open range of participant decision indices. The call
    may raise :class:`~trialfidelity.errors.SensorTimeout` or return any
    payload, including an empty or malformed one; the service parses it.
    """

    def request(self, participant_id, span: tuple[int, int], minute: int) -> Any: ...


def parse_sensor_payload(raw: Any, participant_id, span: tuple[int, int]) -> SensorWindow:
    if raw is None or raw == "" or raw == {} or raw == []:
        raise RateLimitedEmpty("empty sensor response")
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedPayload(f"unparseable sensor response: {exc}") from exc
    if not isinstance(raw, dict):
        raise MalformedPayload("sensor response is not an object")
    try:
        brushing = raw["brushing_seconds"]
        app = raw.get("app_opened_prior_day")
        if raw.get("participant_id") != participant_id:
            raise MalformedPayload("participant mismatch in sensor response")
        if not isinstance(brushing, list) or len(brushing) != max(0, span[1] - span[0]):
            raise MalformedPayload("brushing history length does not match the span")
        history = tuple(None if q is None else float(q) for q in brushing)
        return SensorWindow(
            history, (), None if app is None else int(app),
            history[-1] if history else None,
        )
    except MalformedPayload:
        raise
    except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
        raise MalformedPayload(f"malformed sensor response: {exc}") from exc


# ---------------------------------------------------------------- service


@dataclass
class _Pending:
    participant_id: int
    decision_index: int
    decision_time: int
    seq: int
    state: Optional[StateVector]
    pi: float
    action: int
    kind: str


class RLService:
    """Action selection, weekly updates and the internal store.

    Serving never raises: any internal failure is turned into an alert and the
    uniform fallback schedule. Updates never raise either; a failed update
    leaves the current posterior in place.
    """

    def __init__(self, config: ServiceConfig, sensor_source: SensorSource,
                 store: EventStore | None = None, monitor: Monitor | None = None):
        self.config = config
        self.sensor_source = sensor_source
        self.store = store if store is not None else EventStore()
        self.monitor = monitor if monitor is not None else Monitor()
        self._registry: dict[int, int] = {}
        self._posterior = PosteriorState.from_prior(config.prior)
        self._snapshot_lock = threading.Lock()
        self._update_lock = threading.Lock()
        self._request_counts: collections.Counter = collections.Counter()
        self._pending: list[_Pending] = []
        self.store.append_event(
            0, None, "policy_update_succeeded",
            {"initial": True, "posterior": self._posterior.to_dict(),
             "config": config.to_dict()},
            self._posterior.version_id,
        )

    # -- registry and snapshots

    def register(self, participant_id: int, start_step: int) -> None:
        """Register a participant whose decision index 0 is global step ``start_step``."""
        self._registry[participant_id] = start_step

    def unregister(self, participant_id: int) -> None:
        self._registry.pop(participant_id, None)

    @property
    def posterior(self) -> PosteriorState:
        with self._snapshot_lock:
            return self._posterior

    # -- logging helpers

    def _append(self, ts, participant_id, kind, payload, version) -> int:
        return self.store.append_event(ts, participant_id, kind, payload, version)

    def _raise_alert(self, alert: Alert, version: str | None) -> Alert:
        self.monitor.emit(alert)
        try:
            self._append(alert.timestamp, alert.participant_id, "alert", alert.to_dict(), version)
        except StoreError as exc:
            # the alert itself is already delivered; the lost log line is a second red
            self.monitor.emit(classify_failure(exc, alert.participant_id, alert.timestamp))
        return alert

    def _ledger(self, entry: LedgerEntry, version: str | None) -> None:
        self.monitor.record_ledger(entry)
        try:
            self._append(entry.timestamp, None, "ledger",
                         {"category": entry.category, "payload": entry.payload,
                          "fault_id": entry.fault_id}, version)
        except StoreError as exc:
            self.monitor.emit(classify_failure(exc, None, entry.timestamp))

    # -- sensor data

    def fetch_sensor_data(self, participant_id, span: tuple[int, int], now: int = 0
                          ) -> SensorWindow:
        """Fetch and parse sensor data for decision indices ``span`` (half-open).

        With pacing on, requests beyond the configured per-minute limit are
        pushed to the next free minute instead of being sent. Empty responses
        are retried up to ``retry.max_attempts`` times. Raises one of the typed
        :class:`SensorFailure` subclasses when the data cannot be obtained.
        """
        return self._fetch(participant_id, span, now)[0]

    def _fetch(self, participant_id, span: tuple[int, int], now: int
               ) -> tuple[SensorWindow, dict]:
        limit = self.config.rate_limit.requests_per_minute
        minute = now
        attempts = 0
        while True:
            if self.config.rate_limit.pacing:
                while self._request_counts[minute] >= limit:
                    minute += 1
            self._request_counts[minute] += 1
            attempts += 1
            try:
                raw = self.sensor_source.request(participant_id, span, minute)
                window = parse_sensor_payload(raw, participant_id, span)
                return window, {"minute": minute, "attempts": attempts}
            except RateLimitedEmpty as exc:
                if attempts >= self.config.retry.max_attempts:
                    exc.detail.setdefault("minute", minute)
                    raise
                minute += self.config.retry.backoff_minutes

    # -- action selection

    def _served_history(self, participant_id) -> list[int]:
        records = self.store.read_log(participant_id, SCHEDULE_KINDS, last=WINDOW)
        return [int(r.payload["actions"][0]) for r in records]

    def serve_action_selection(self, participant_id, decision_time: int) -> ActionSchedule:
        ts = decision_ts(decision_time)
        posterior = self.posterior
        version = posterior.version_id
        schedule_seed = derive_seed(self.config.trial_seed, _id_int(participant_id), decision_time)
        decision_index = None
        history: Optional[list[int]] = None
        try:
            start = self._registry.get(participant_id)
            if start is not None and decision_time >= start:
                decision_index = decision_time - start
            self._append(ts, participant_id, "decision_point",
                         {"decision_time": decision_time, "decision_index": decision_index},
                         version)
            if decision_index is None:
                raise UnknownParticipantError(f"participant {participant_id} is not enrolled")
            history = self._served_history(participant_id)
            span = (max(0, decision_index - WINDOW), decision_index)
            window, meta = self._fetch(participant_id, span, ts)
            window = dataclasses.replace(window, prompts_sent_history=tuple(history))
            self._append(ts, participant_id, "sensor_fetch", {
                "span": list(span), "brushing_seconds": list(window.brushing_quality_history),
                "app_opened_prior_day": window.app_opened_prior_day,
                "prompts_sent_history": list(history),
                "cold_start": is_cold_start(window.brushing_quality_history), **meta,
            }, version)
            tod = decision_time % 2
            states = (build_state(window, tod), build_state(window, 1 - tod))
            schedule = build_full_schedule(
                participant_id, decision_index, states, posterior, self.config.logistic,
                schedule_seed, history, self.config.quad_nodes,
            )
            seq = self._append(ts, participant_id, "schedule_built",
                               {**schedule.to_record(), "decision_time": decision_time}, version)
        except TrialFidelityError as exc:
            return self._serve_fallback(participant_id, decision_time, decision_index,
                                        schedule_seed, ts, version, exc, history)
        self._after_serve(participant_id, decision_time, decision_index, schedule, seq, ts,
                          version, history)
        return schedule

    def _serve_fallback(self, participant_id, decision_time, decision_index, schedule_seed, ts,
                        version, exc, history) -> ActionSchedule:
        alert = classify_failure(exc, participant_id, ts)
        self._raise_alert(alert, version)
        formed_at = decision_index if decision_index is not None else decision_time
        schedule = fallback_uniform_schedule(participant_id, formed_at, schedule_seed)
        seq = None
        try:
            seq = self._append(ts, participant_id, "fallback_invoked", {
                **schedule.to_record(), "decision_time": decision_time,
                "reason": alert.check_id, "fault_id": alert.fault_id,
            }, version)
        except StoreError as exc2:
            self._raise_alert(classify_failure(exc2, participant_id, ts), version)
        self._after_serve(participant_id, decision_time, decision_index, schedule, seq, ts,
                          version, history)
        return schedule

    def _after_serve(self, participant_id, decision_time, decision_index, schedule, seq, ts,
                     version, history) -> None:
        try:
            self._append(ts, participant_id, "schedule_pushed",
                         {"decision_time": decision_time, "schedule_kind": schedule.kind}, version)
        except StoreError as exc:
            self._raise_alert(classify_failure(exc, participant_id, ts), version)
        if decision_index is not None and seq is not None:
            state = schedule.states[0] if schedule.kind == STANDARD else None
            self._pending.append(_Pending(
                participant_id, decision_index, decision_time, seq, state,
                float(schedule.pis[0]), int(schedule.actions[0]), schedule.kind,
            ))
        # the prompt-count check needs a readable history and a full week of decisions
        if history is not None:
            window = (list(history) + [int(schedule.actions[0])])[-WINDOW:]
            if len(window) == WINDOW:
                alert = check_prompt_count(participant_id, window, self.config.thresholds, ts)
                if alert is not None:
                    self._raise_alert(alert, version)

    # -- weekly update

    def run_weekly_update(self, now: int) -> PosteriorState:
        """Rebuild the posterior from every complete tuple in the log.

        ``now`` is the simulated day and must be a Sunday. Rewards are built for
        every decision served since the previous boundary; those whose data is
        missing or whose fetch failed are logged as incomplete and never used.
        A malformed reward payload, an unreadable history, a numerical failure
        or a failed write of the new posterior skips the update and keeps the
        current policy.
        """
        if not is_update_day(now):
            raise InvalidInputError(f"day {now} is not an update boundary")
        ts = now * MINUTES_PER_DAY
        with self._update_lock:
            current = self.posterior
            version = current.version_id
            pending, self._pending = self._pending, []
            skip_reason = None
            skip_fault = None
            alert_raised = False

            by_participant: dict[int, list[_Pending]] = collections.defaultdict(list)
            for p in pending:
                by_participant[p.participant_id].append(p)
            outcomes: dict[int, Optional[tuple]] = {}
            for pid in sorted(by_participant, key=_id_int):
                items = by_participant[pid]
                span = (min(p.decision_index for p in items),
                        max(p.decision_index for p in items) + 1)
                try:
                    window = self.fetch_sensor_data(pid, span, ts)
                    outcomes[pid] = (span, window.brushing_quality_history, None)
                except MalformedPayload as exc:
                    outcomes[pid] = (span, None, exc.kind)
                    skip_reason = exc.kind
                    skip_fault = exc.fault_id
                except SensorFailure as exc:
                    outcomes[pid] = (span, None, exc.kind)
                    self._raise_alert(classify_failure(exc, pid, ts), version)

            try:
                for p in pending:
                    span, brushing, failure = outcomes[p.participant_id]
                    self._append(ts, p.participant_id, "reward_constructed",
                                 self._reward_payload(p, span, brushing, failure), version)
            except StoreError as exc:
                self._raise_alert(classify_failure(exc, None, ts), version)
                skip_reason, alert_raised = exc.kind, True

            new = None
            if skip_reason is None:
                try:
                    new = self._recompute_posterior(current)
                except StoreReadError as exc:
                    self._raise_alert(classify_failure(exc, None, ts), version)
                    skip_reason, alert_raised = exc.kind, True
                except NumericalFailure as exc:
                    self._raise_alert(classify_failure(exc, None, ts), version)
                    skip_reason, alert_raised = exc.kind, True

            if new is not None:
                try:
                    self._append(ts, None, "policy_update_succeeded",
                                 {"posterior": new.to_dict(), "n_new": len(pending)},
                                 new.version_id)
                except StoreError as exc:
                    self._raise_alert(classify_failure(exc, None, ts), version)
                    skip_reason, alert_raised, new = exc.kind, True, None

            if new is None:
                try:
                    self._append(ts, None, "policy_update_skipped",
                                 {"reason": skip_reason, "retained_version": version,
                                  "n_new": len(pending)}, version)
                except StoreError as exc:
                    self._raise_alert(classify_failure(exc, None, ts), version)
                self._ledger(LedgerEntry(
                    "update_failure", ts,
                    {"day": now, "reason": skip_reason, "retained_version": version},
                    fault_id=None if alert_raised else skip_fault,
                ), version)
                return current

            with self._snapshot_lock:
                self._posterior = new
            self._ledger(LedgerEntry(
                "update_success", ts,
                {"day": now, "version": new.version_id, "trained_on": new.trained_on},
            ), new.version_id)
            return new

    def _reward_payload(self, p: _Pending, span, brushing, failure) -> dict:
        payload = {
            "decision_time": p.decision_time, "decision_index": p.decision_index,
            "schedule_seq": p.seq, "pi": p.pi, "action": p.action,
            "state": None if p.state is None else p.state.to_list(),
        }
        seconds = None if brushing is None else brushing[p.decision_index - span[0]]
        payload["raw_seconds"] = seconds
        if failure is not None:
            reason = failure
        elif p.state is None:
            reason = "no_state"
        elif seconds is None:
            reason = "missing_sensor"
        else:
            reason = None
        if reason is None:
            rec = reward_for(p.state, p.action, seconds, self.config.cost)
            payload.update(complete=True, reason=None, q=rec.q, cost=rec.cost,
                           reward=rec.reward, components=rec.components)
        else:
            payload.update(complete=False, reason=reason, q=None, cost=None, reward=None,
                           components={})
        return payload

    def _recompute_posterior(self, current: PosteriorState) -> PosteriorState:
        records = self.store.read_log(None, ("reward_constructed",))
        rows = [r.payload for r in records if r.payload["complete"]]
        states, pis, actions, rewards = training_arrays(rows)
        prior = self.config.prior
        return posterior_from_arrays(
            prior.mean, prior.cov, prior.noise_var, design_rows(states, pis, actions), rewards,
            update_index=current.update_index + 1, trained_on=len(rows),
        )

    # -- API boundary

    def handle_action_selection(self, request: dict) -> dict:
        """``{participant_id, decision_time}`` -> ``{schedule: [...]}``."""
        _reject_unknown_request(request, ("participant_id", "decision_time"))
        pid, step = request["participant_id"], int(request["decision_time"])
        try:
            self._append(decision_ts(step), pid, "api_call",
                         {"endpoint": "action_selection", "decision_time": step},
                         self.posterior.version_id)
        except StoreError as exc:
            self._raise_alert(classify_failure(exc, pid, decision_ts(step)),
                              self.posterior.version_id)
        return self.serve_action_selection(pid, step).to_response()

    def handle_update(self, request: dict) -> dict:
        """``{now}`` -> ``{policy_version, update_index}``."""
        _reject_unknown_request(request, ("now",))
        now = int(request["now"])
        try:
            self._append(now * MINUTES_PER_DAY, None, "api_call",
                         {"endpoint": "update", "now": now}, self.posterior.version_id)
        except StoreError as exc:
            self._raise_alert(classify_failure(exc, None, now * MINUTES_PER_DAY),
                              self.posterior.version_id)
        post = self.run_weekly_update(now)
        return {"policy_version": post.version_id, "update_index": post.update_index}


def _reject_unknown_request(request: dict, keys) -> None:
    if not isinstance(request, dict) or set(request) != set(keys):
        raise InvalidInputError(f"request must have exactly the keys {sorted(keys)}")


def _id_int(participant_id) -> int:
    if isinstance(participant_id, (int, np.integer)) and participant_id >= 0:
        return int(participant_id)
    return derive_seed(*str(participant_id).encode())


def training_arrays(rows: Sequence[dict]) -> tuple[np.ndarray, ...]:
    if not rows:
        return np.zeros((0, N_FEATURES)), np.zeros(0), np.zeros(0), np.zeros(0)
    states = np.array([r["state"] for r in rows], dtype=float)
    pis = np.array([r["pi"] for r in rows], dtype=float)
    actions = np.array([r["action"] for r in rows], dtype=float)
    rewards = np.array([r["reward"] for r in rows], dtype=float)
    return states, pis, actions, rewards


def design_rows(states: np.ndarray, pis: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorized design rows ``[f, pi f, (a - pi) f]`` for many decisions."""
    pis = pis[:, None]
    return np.hstack([states, pis * states, (actions[:, None] - pis) * states])


# ---------------------------------------------------------------- replay


def replay(records: Sequence[EventRecord]) -> list[DecisionOutcome]:
    """Recompute every served schedule from the log and check it bit for bit.

    Returns one outcome per served decision (its offset-0 entry). Raises
    :class:`ReplayMismatch` at the first record whose probabilities or actions
    cannot be reproduced.
    """
    posteriors: dict[str, PosteriorState] = {}
    params: LogisticParams | None = None
    quad_nodes = DEFAULT_QUAD_NODES
    outcomes: list[DecisionOutcome] = []
    for rec in records:
        if rec.kind == "policy_update_succeeded":
            try:
                posteriors[rec.policy_version] = PosteriorState.from_dict(rec.payload["posterior"])
                if rec.payload.get("initial"):
                    cfg = rec.payload["config"]
                    params = LogisticParams(**cfg["logistic"])
                    quad_nodes = int(cfg["quadrature"]["nodes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ReplayMismatch(rec.seq, f"unreadable policy record: {exc}") from exc
        elif rec.kind in SCHEDULE_KINDS:
            outcomes.append(_replay_schedule(rec, posteriors, params, quad_nodes))
    return outcomes


def _replay_schedule(rec: EventRecord, posteriors, params, quad_nodes) -> DecisionOutcome:
    p = rec.payload
    try:
        seeds = entry_seeds(int(p["schedule_seed"]), SCHEDULE_LENGTH)
        logged_actions = p["actions"]
        pis = np.full(SCHEDULE_LENGTH, FIXED_PI)
        states = [StateVector.from_sequence(s) for s in p["states"]]
        if p["schedule_kind"] == STANDARD:
            if params is None or rec.policy_version not in posteriors:
                raise ReplayMismatch(rec.seq, f"unknown policy version {rec.policy_version}")
            beta = marginal_advantage_posterior(posteriors[rec.policy_version])
            if len(states) != len(p["pis"]):
                raise ReplayMismatch(rec.seq, "state and probability counts differ")
            for k, state in enumerate(states):
                pi = action_selection_prob(state, beta, params, quad_nodes)
                if pi != p["pis"][k]:
                    raise ReplayMismatch(rec.seq, f"pi mismatch at offset {k}")
                pis[k] = pi
        elif p["schedule_kind"] != FALLBACK_UNIFORM or states or p["pis"]:
            raise ReplayMismatch(rec.seq, "malformed fallback record")
        actions = "".join(str(int(a)) for a in sample_actions(pis, seeds))
    except ReplayMismatch:
        raise
    except (KeyError, TypeError, ValueError, TrialFidelityError) as exc:
        raise ReplayMismatch(rec.seq, f"unreadable schedule record: {exc}") from exc
    if actions != logged_actions:
        raise ReplayMismatch(rec.seq, "action mismatch")
    kind = state_kind_for_offset(0) if p["schedule_kind"] == STANDARD else "fixed"
    return DecisionOutcome(
        float(pis[0]), int(actions[0]), int(seeds[0]), rec.policy_version,
        states[0] if states else None, kind,
    )
