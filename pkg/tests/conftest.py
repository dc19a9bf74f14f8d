import time

import numpy as np
import pytest
from hypothesis import settings

from trialfidelity.service import RLService
from trialfidelity.trial_sim import FaultPlan, TrialConfig, run_trial

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# one fault of every kind in every phase it can occur in
FAULT_DRILL = [
    {"day": 3, "fault_kind": "sensor_timeout", "scope": {"participant": 3}},
    {"day": 4, "fault_kind": "rate_limited_empty", "scope": {"participant": 1}},
    {"day": 5, "fault_kind": "malformed_payload", "scope": {"participant": 2}},
    {"day": 6, "fault_kind": "store_write_fail", "scope": {"participant": 4}},
    {"day": 6, "fault_kind": "store_read_fail", "scope": {"participant": 0}},
    {"day": 8, "fault_kind": "controller_timeout_blank_schedule", "scope": {"participants": [0, 1]}},
    {"day": 9, "fault_kind": "unknown_participant_call", "scope": {"participant": 2}},
    {"day": 7, "fault_kind": "malformed_payload", "scope": {"phase": "update"}},
    {"day": 14, "fault_kind": "sensor_timeout", "scope": {"phase": "update"}},
    {"day": 21, "fault_kind": "rate_limited_empty", "scope": {"phase": "update"}},
    {"day": 28, "fault_kind": "store_read_fail", "scope": {"phase": "update"}},
    {"day": 35, "fault_kind": "store_write_fail", "scope": {"phase": "update"}},
]

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def run_capturing(*args, **kwargs):
    """run_trial, also returning every schedule object the service handed out."""
    served = []
    original = RLService.serve_action_selection

    def serve(self, *a, **k):
        sched = original(self, *a, **k)
        served.append(sched)
        return sched

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(RLService, "serve_action_selection", serve)
        result = run_trial(*args, **kwargs)
    return result, served


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The default trial with no faults, logged to disk, with wall time and served schedules."""
    path = tmp_path_factory.mktemp("default") / "events.jsonl"
    start = time.perf_counter()
    result, served = run_capturing(log_path=path)
    elapsed = time.perf_counter() - start
    pis = np.vstack([s.pis for s in served])
    kinds = [s.kind for s in served]
    return result, path, elapsed, pis, kinds


@pytest.fixture(scope="session")
def drill_run():
    return run_capturing(TrialConfig(n_participants=10, seed=0), None,
                         FaultPlan.from_list(FAULT_DRILL))
