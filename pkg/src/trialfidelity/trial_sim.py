"""Simulated trial: participants, the main-controller stand-in, the clock and faults.

The clock advances one day at a time. Day 0 is a Sunday; every Sunday the
weekly update runs before that day's decisions. Participants enroll in waves
and each gets two decision times a day for ``duration_days`` days.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from scipy import stats

from .errors import ConfigError, SensorTimeout, StoreReadError, StoreWriteError
from .monitoring import RED, YELLOW, LedgerEntry, Monitor
from .scheduler import SCHEDULE_LENGTH
from .service import (
    MINUTES_PER_DAY,
    EventStore,
    RLService,
    ServiceConfig,
    decision_ts,
    is_update_day,
)

PROMPT_CATEGORIES = ("direct_reciprocity", "reciprocity_by_proxy", "qa_or_feedback")

FAULT_KINDS = (
    "sensor_timeout",
    "rate_limited_empty",
    "malformed_payload",
    "store_write_fail",
    "store_read_fail",
    "controller_timeout_blank_schedule",
    "unknown_participant_call",
)
UPDATE_PHASE_FAULTS = FAULT_KINDS[:5]

# what a fired fault must leave behind: (record type, severity or ledger category, check id)
EXPECTED_RECORD = {
    ("serving", "sensor_timeout"): ("alert", YELLOW, "sensor_timeout"),
    ("serving", "rate_limited_empty"): ("alert", YELLOW, "rate_limited_empty"),
    ("serving", "malformed_payload"): ("alert", YELLOW, "malformed_payload"),
    ("serving", "store_read_fail"): ("alert", YELLOW, "store_read_failed"),
    ("serving", "store_write_fail"): ("alert", RED, "store_write_failed"),
    ("serving", "unknown_participant_call"): ("alert", RED, "unknown_participant"),
    ("serving", "controller_timeout_blank_schedule"): ("ledger", "blank_schedule", None),
    ("update", "sensor_timeout"): ("alert", YELLOW, "sensor_timeout"),
    ("update", "rate_limited_empty"): ("alert", YELLOW, "rate_limited_empty"),
    ("update", "malformed_payload"): ("ledger", "update_failure", "malformed_payload"),
    ("update", "store_read_fail"): ("alert", YELLOW, "store_read_failed"),
    ("update", "store_write_fail"): ("alert", RED, "store_write_failed"),
}


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class PopulationConfig:
    """Generative behaviour model. Effects are in brushing seconds per delivered prompt."""

    brush_mean_low: float = 60.0
    brush_mean_high: float = 140.0
    brush_sd: float = 25.0
    effect_mean_morning: float = 0.0
    effect_mean_evening: float = 0.0
    effect_sd: float = 2.0
    app_open_low: float = 0.3
    app_open_high: float = 0.9
    missing_prob: float = 0.02

    def __post_init__(self):
        if not self.brush_mean_low <= self.brush_mean_high or self.brush_sd <= 0:
            raise ConfigError("invalid brushing distribution")
        if not 0 <= self.app_open_low <= self.app_open_high <= 1:
            raise ConfigError("app-open probabilities must satisfy 0 <= low <= high <= 1")
        if not 0 <= self.missing_prob < 1 or self.effect_sd < 0:
            raise ConfigError("invalid missing_prob or effect_sd")

    @classmethod
    def responsive(cls) -> "PopulationConfig":
        """Strong positive response to evening prompts, none in the morning."""
        return cls(effect_mean_morning=0.0, effect_mean_evening=40.0, effect_sd=5.0)


@dataclass(frozen=True)
class TrialConfig:
    n_participants: int = 70
    wave_size: int = 5
    wave_interval_days: int = 14
    duration_days: int = 70
    decision_times_per_day: int = 2
    update_weekday: str = "sunday"
    seed: int = 0
    controller_rate_limit: int = 60
    population: PopulationConfig = field(default_factory=PopulationConfig)

    def __post_init__(self):
        for name in ("n_participants", "wave_size", "wave_interval_days", "duration_days",
                     "controller_rate_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.decision_times_per_day != 2:
            raise ConfigError("exactly two decision times per day are supported")
        if self.update_weekday.lower() != "sunday":
            raise ConfigError("updates run on Sundays")
        if self.duration_days * 2 > SCHEDULE_LENGTH:
            raise ConfigError(f"duration_days x 2 cannot exceed the schedule length {SCHEDULE_LENGTH}")

    @property
    def total_days(self) -> int:
        n_waves = -(-self.n_participants // self.wave_size)
        return (n_waves - 1) * self.wave_interval_days + self.duration_days

    def enrollment_day(self, participant_id: int) -> int:
        return (participant_id // self.wave_size) * self.wave_interval_days

    @classmethod
    def from_dict(cls, data: dict) -> "TrialConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in trial config: {sorted(unknown)}")
        data = dict(data)
        pop = data.pop("population", {})
        if isinstance(pop, str):
            if pop != "responsive":
                raise ConfigError(f"unknown population preset {pop!r}")
            population = PopulationConfig.responsive()
        else:
            pop_fields = {f.name for f in dataclasses.fields(PopulationConfig)}
            if set(pop) - pop_fields:
                raise ConfigError(f"unknown keys in population: {sorted(set(pop) - pop_fields)}")
            population = PopulationConfig(**pop)
        try:
            return cls(population=population, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrialConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read trial config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("trial config must be a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class Fault:
    day: int
    fault_kind: str
    scope: dict
    fault_id: str

    @property
    def phase(self) -> str:
        return self.scope.get("phase", "serving")

    def targets(self) -> Optional[set]:
        if "participant" in self.scope:
            return {self.scope["participant"]}
        if "participants" in self.scope:
            return set(self.scope["participants"])
        return None


@dataclass(frozen=True)
class FaultPlan:
    faults: tuple[Fault, ...] = ()

    @classmethod
    def from_list(cls, items: list) -> "FaultPlan":
        if not isinstance(items, list):
            raise ConfigError("a fault plan is a JSON list")
        faults = []
        for i, item in enumerate(items):
            if not isinstance(item, dict) or set(item) - {"day", "fault_kind", "scope"}:
                raise ConfigError(f"fault {i}: expected keys day, fault_kind, scope")
            kind = item.get("fault_kind")
            if kind not in FAULT_KINDS:
                raise ConfigError(f"fault {i}: unknown fault kind {kind!r}")
            scope = item.get("scope") or {}
            if not isinstance(scope, dict) or set(scope) - {"participant", "participants", "phase"}:
                raise ConfigError(f"fault {i}: scope may only set participant, participants, phase")
            phase = scope.get("phase", "serving")
            if phase not in ("serving", "update"):
                raise ConfigError(f"fault {i}: phase must be serving or update")
            if phase == "update" and kind not in UPDATE_PHASE_FAULTS:
                raise ConfigError(f"fault {i}: {kind} cannot target the update")
            day = item.get("day")
            if not isinstance(day, int) or day < 0:
                raise ConfigError(f"fault {i}: day must be a non-negative integer")
            faults.append(Fault(day, kind, dict(scope), f"f{i}"))
        return cls(tuple(faults))

    @classmethod
    def load(cls, path) -> "FaultPlan":
        try:
            return cls.from_list(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read fault plan {path}: {exc}") from exc


# ---------------------------------------------------------------- participants


@dataclass
class SimParticipant:
    id: int
    enrollment_day: int
    base_mean: float
    brush_sd: float
    effect_morning: float
    effect_evening: float
    app_open_prob: float
    missing_prob: float
    rng: np.random.Generator = field(repr=False)
    app_opened: list[int] = field(default_factory=list, repr=False)
    brushing: list[Optional[float]] = field(default_factory=list, repr=False)

    @classmethod
    def generate(cls, trial_seed: int, pid: int, enrollment_day: int, duration_days: int,
                 pop: PopulationConfig) -> "SimParticipant":
        rng = np.random.default_rng([trial_seed, pid])
        p = cls(
            pid, enrollment_day,
            base_mean=rng.uniform(pop.brush_mean_low, pop.brush_mean_high),
            brush_sd=pop.brush_sd,
            effect_morning=rng.normal(pop.effect_mean_morning, pop.effect_sd),
            effect_evening=rng.normal(pop.effect_mean_evening, pop.effect_sd),
            app_open_prob=rng.uniform(pop.app_open_low, pop.app_open_high),
            missing_prob=pop.missing_prob,
            rng=rng,
        )
        # index 0 is the day before enrollment
        p.app_opened = [int(x) for x in rng.random(duration_days + 1) < p.app_open_prob]
        return p

    def draw_brushing(self, time_of_day: int, prompted: int) -> Optional[float]:
        mean = self.base_mean + prompted * (self.effect_evening if time_of_day else self.effect_morning)
        a, b = (0.0 - mean) / self.brush_sd, (180.0 - mean) / self.brush_sd
        seconds = float(stats.truncnorm.rvs(a, b, loc=mean, scale=self.brush_sd,
                                            random_state=self.rng))
        missing = self.rng.random() < self.missing_prob
        value = None if missing else seconds
        self.brushing.append(value)
        return value


# ---------------------------------------------------------------- fault injection


@dataclass
class FiredFault:
    fault: Fault
    phase: str
    participant_id: Optional[int]
    ts: int
    detail: dict = field(default_factory=dict)


class FaultInjector:
    """Arms faults on their day and fires each one once, at the next matching interaction.

    The simulator brackets every service call in :meth:`interaction`; at most
    one fault is active per interaction. A fault that was active but whose
    operation never happened goes back to the armed pool.
    """

    def __init__(self, plan: FaultPlan):
        self._pending = sorted(plan.faults, key=lambda f: (f.day, f.fault_id))
        self.armed: list[Fault] = []
        self.fired: list[FiredFault] = []
        self.active: Optional[Fault] = None
        self._context: tuple = ("idle", None, 0)

    def arm(self, day: int) -> None:
        while self._pending and self._pending[0].day <= day:
            self.armed.append(self._pending.pop(0))

    def _matching(self, phase: str, participant_id, kinds=None) -> Optional[Fault]:
        for f in self.armed:
            if f.phase != phase or (kinds is not None and f.fault_kind not in kinds):
                continue
            targets = f.targets()
            if phase == "update" or targets is None or participant_id in targets:
                return f
        return None

    @contextlib.contextmanager
    def interaction(self, phase: str, participant_id, ts: int,
                    exclude=("controller_timeout_blank_schedule",)) -> Iterator[Optional[Fault]]:
        kinds = [k for k in FAULT_KINDS if k not in exclude]
        fault = self._matching(phase, participant_id, kinds)
        if fault is not None:
            self.armed.remove(fault)
        self.active = fault
        self._context = (phase, participant_id, ts)
        try:
            yield fault
        finally:
            if fault is not None and not any(ff.fault is fault for ff in self.fired):
                if fault.fault_kind == "unknown_participant_call":
                    self.fire(fault)
                else:
                    self.armed.append(fault)
                    self.armed.sort(key=lambda f: (f.day, f.fault_id))
            self.active = None
            self._context = ("idle", None, 0)

    def fire(self, fault: Fault, **detail) -> FiredFault:
        phase, pid, ts = self._context
        fired = FiredFault(fault, phase, pid, ts, detail)
        self.fired.append(fired)
        return fired

    def take_blank(self, active_ids: list[int], ts: int) -> tuple[Optional[Fault], list[int]]:
        for f in self.armed:
            if f.fault_kind != "controller_timeout_blank_schedule":
                continue
            targets = f.targets()
            affected = [p for p in active_ids if targets is None or p in targets]
            if affected:
                self.armed.remove(f)
                self.fired.append(FiredFault(f, "serving", None, ts, {"participants": affected}))
                return f, affected
        return None, []

    # -- hooks called by the sensor source and the store

    def sensor_fault(self, participant_id) -> Optional[Fault]:
        f = self.active
        if f is None or f.fault_kind not in ("sensor_timeout", "rate_limited_empty",
                                             "malformed_payload"):
            return None
        phase, pid, _ = self._context
        targets = f.targets()
        if phase == "update" and targets is not None and participant_id not in targets:
            return None
        if not any(ff.fault is f for ff in self.fired):
            self.fire(f, participant_id=participant_id)
        elif self.fired[-1].detail.get("participant_id") != participant_id:
            return None
        return f

    def on_write(self, kind: str, participant_id) -> None:
        f = self.active
        if f is None or f.fault_kind != "store_write_fail":
            return
        target_kind = "policy_update_succeeded" if f.phase == "update" else "schedule_built"
        if kind == target_kind and not any(ff.fault is f for ff in self.fired):
            self.fire(f)
            raise StoreWriteError("injected write failure", fault_id=f.fault_id)

    def on_read(self, participant_id, kinds) -> None:
        f = self.active
        if f is None or f.fault_kind != "store_read_fail":
            return
        if not any(ff.fault is f for ff in self.fired):
            self.fire(f)
            raise StoreReadError("injected read failure", fault_id=f.fault_id)


# ---------------------------------------------------------------- controller side


class ControllerSensorSource:
    """Serves sensor payloads from simulator ground truth, with a per-minute request cap.

    Requests beyond ``rate_limit`` in one simulated minute get an empty body.
    """

    def __init__(self, participants: dict[int, SimParticipant], rate_limit: int,
                 injector: FaultInjector | None = None):
        self.participants = participants
        self.rate_limit = rate_limit
        self.injector = injector
        self.requests_per_minute: dict[int, int] = {}
        self.n_requests = 0

    def request(self, participant_id, span: tuple[int, int], minute: int) -> Any:
        self.n_requests += 1
        count = self.requests_per_minute.get(minute, 0) + 1
        self.requests_per_minute[minute] = count
        if self.injector is not None:
            fault = self.injector.sensor_fault(participant_id)
            if fault is not None:
                if fault.fault_kind == "sensor_timeout":
                    raise SensorTimeout("injected sensor timeout", fault_id=fault.fault_id)
                if fault.fault_kind == "rate_limited_empty":
                    return {}
                return '{"participant_id": ' + str(participant_id) + ', "brushing_sec'
        if count > self.rate_limit:
            return {}
        p = self.participants[participant_id]
        t0, t1 = span
        day = t0 // 2 if t1 <= t0 else t1 // 2
        return {
            "participant_id": participant_id,
            "span": [t0, t1],
            "brushing_seconds": [p.brushing[t] for t in range(t0, t1)],
            "app_opened_prior_day": p.app_opened[day],
        }


@dataclass
class Delivery:
    participant_id: int
    step: int
    decision_index: int
    scheduled_action: int
    delivered_action: int
    category: Optional[str]


class ControllerStandIn:
    """Pushes schedules to participants' apps and picks prompt content."""

    def __init__(self, seed: int, monitor: Monitor):
        self.rng = np.random.default_rng([seed, 0xC0])
        self.monitor = monitor
        self.deliveries: list[Delivery] = []

    def push_schedule(self, schedule, step: int, decision_index: int, blank: bool = False) -> Delivery:
        scheduled = int(schedule.actions[0])
        delivered = 0 if blank else scheduled
        category = None
        if delivered:
            category = PROMPT_CATEGORIES[int(self.rng.integers(len(PROMPT_CATEGORIES)))]
        d = Delivery(schedule.participant_id, step, decision_index, scheduled, delivered, category)
        self.deliveries.append(d)
        return d

    def document_blank(self, fault: Fault, affected: list[tuple[int, int]], ts: int) -> None:
        self.monitor.record_ledger(LedgerEntry(
            "blank_schedule", ts,
            {"cause": "controller timed out waiting for the schedule",
             "affected": [{"participant_id": p, "decision_index": t, "offsets": [0]}
                          for p, t in affected]},
            fault_id=fault.fault_id,
        ))


# ---------------------------------------------------------------- the run


@dataclass
class TrialResult:
    store: EventStore
    monitor: Monitor
    summary: dict
    participants: dict[int, SimParticipant]
    deliveries: list[Delivery]
    fired_faults: list[FiredFault]
    planned_faults: int

    @property
    def ledger(self):
        return self.monitor.ledger

    def attribution(self) -> dict[str, list]:
        return attribute_faults(self.fired_faults, self.monitor)


def run_trial(trial_config: TrialConfig | None = None,
              service_config: ServiceConfig | None = None,
              fault_plan: FaultPlan | None = None,
              log_path=None,
              monitor: Monitor | None = None) -> TrialResult:
    trial_config = trial_config or TrialConfig()
    service_config = service_config or ServiceConfig(trial_seed=trial_config.seed)
    fault_plan = fault_plan or FaultPlan()

    injector = FaultInjector(fault_plan)
    participants = {
        pid: SimParticipant.generate(trial_config.seed, pid, trial_config.enrollment_day(pid),
                                     trial_config.duration_days, trial_config.population)
        for pid in range(trial_config.n_participants)
    }
    source = ControllerSensorSource(participants, trial_config.controller_rate_limit, injector)
    monitor = monitor or Monitor()
    store = EventStore(log_path, fault_hook=injector)
    service = RLService(service_config, source, store, monitor)
    controller = ControllerStandIn(trial_config.seed, monitor)
    for pid, p in participants.items():
        service.register(pid, 2 * p.enrollment_day)

    update_days = []
    for day in range(trial_config.total_days):
        injector.arm(day)
        if is_update_day(day):
            with injector.interaction("update", None, day * MINUTES_PER_DAY):
                service.run_weekly_update(day)
            update_days.append(day)
        active = [p for p in participants.values()
                  if p.enrollment_day <= day < p.enrollment_day + trial_config.duration_days]
        for tod in (0, 1):
            step = 2 * day + tod
            ts = decision_ts(step)
            blank_fault, blank_ids = injector.take_blank([p.id for p in active], ts)
            blank_affected = []
            for p in active:
                t = step - 2 * p.enrollment_day
                with injector.interaction("serving", p.id, ts) as fault:
                    if fault is not None and fault.fault_kind == "unknown_participant_call":
                        service.unregister(p.id)
                        schedule = service.serve_action_selection(p.id, step)
                        service.register(p.id, 2 * p.enrollment_day)
                    else:
                        schedule = service.serve_action_selection(p.id, step)
                blank = p.id in blank_ids
                if blank:
                    blank_affected.append((p.id, t))
                delivery = controller.push_schedule(schedule, step, t, blank=blank)
                p.draw_brushing(tod, delivery.delivered_action)
            if blank_fault is not None:
                controller.document_blank(blank_fault, blank_affected, ts)

    store.close()
    summary = summarize(store.records, monitor, controller.deliveries, update_days,
                        injector.fired, len(fault_plan.faults), trial_config)
    return TrialResult(store, monitor, summary, participants, controller.deliveries,
                       injector.fired, len(fault_plan.faults))


def attribute_faults(fired: list[FiredFault], monitor: Monitor) -> dict[str, list]:
    """Alerts and ledger entries that each fired fault left behind."""
    out: dict[str, list] = {}
    for ff in fired:
        record_type, _, check = EXPECTED_RECORD[(ff.phase, ff.fault.fault_kind)]
        matches: list = []
        if record_type == "alert":
            pid = ff.participant_id if ff.phase == "serving" else ff.detail.get("participant_id")
            for a in monitor.alerts:
                if a.timestamp != ff.ts or a.check_id != check:
                    continue
                if ff.phase == "serving" and a.participant_id != ff.participant_id:
                    continue
                if ff.phase == "update" and pid is not None and a.participant_id not in (pid, None):
                    continue
                matches.append(a)
        for e in monitor.ledger.entries:
            if e.fault_id == ff.fault.fault_id:
                matches.append(e)
            elif (ff.phase, ff.fault.fault_kind) == ("update", "malformed_payload") and \
                    e.category == "update_failure" and e.timestamp == ff.ts and \
                    e.payload.get("reason") == "malformed_payload":
                matches.append(e)
        out[ff.fault.fault_id] = matches
    return out


# ---------------------------------------------------------------- summary


def summarize(records, monitor: Monitor, deliveries: list[Delivery], update_days: list[int],
              fired: list[FiredFault], planned: int, trial_config: TrialConfig) -> dict:
    served: dict[int, int] = {}
    delivered: dict[int, int] = {}
    decisions: dict[int, int] = {}
    pis: list[float] = []
    n_fallback = 0
    for r in records:
        if r.kind == "decision_point" and r.participant_id is not None:
            decisions[r.participant_id] = decisions.get(r.participant_id, 0) + 1
        elif r.kind in ("schedule_built", "fallback_invoked"):
            served[r.participant_id] = served.get(r.participant_id, 0) + int(r.payload["actions"][0])
            if r.kind == "schedule_built":
                pis.append(r.payload["pis"][0])
            else:
                n_fallback += 1
    for d in deliveries:
        delivered[d.participant_id] = delivered.get(d.participant_id, 0) + d.delivered_action
    categories: dict[str, int] = {c: 0 for c in (PROMPT_CATEGORIES)}
    for d in deliveries:
        if d.category is not None:
            categories[d.category] += 1
    ledger_counts: dict[str, int] = {}
    for e in monitor.ledger.entries:
        ledger_counts[e.category] = ledger_counts.get(e.category, 0) + 1
    pi_arr = np.array(pis) if pis else np.zeros(1)
    return {
        "n_participants": trial_config.n_participants,
        "total_days": trial_config.total_days,
        "decision_points": sum(decisions.values()),
        "decision_points_per_participant": {str(k): v for k, v in sorted(decisions.items())},
        "prompts_served": {str(k): v for k, v in sorted(served.items())},
        "prompts_delivered": {str(k): v for k, v in sorted(delivered.items())},
        "prompt_categories": categories,
        "pi": {"n": len(pis), "mean": float(pi_arr.mean()), "min": float(pi_arr.min()),
               "max": float(pi_arr.max())},
        "fallback_schedules": n_fallback,
        "update_days": update_days,
        "update_attempts": len(update_days),
        "alerts": monitor.count_by_severity(),
        "alerts_by_check": _count_checks(monitor),
        "ledger": ledger_counts,
        "faults": {"planned": planned, "fired": len(fired)},
    }


def _count_checks(monitor: Monitor) -> dict[str, int]:
    out: dict[str, int] = {}
    for a in monitor.alerts:
        key = f"{a.severity}:{a.check_id}"
        out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))
