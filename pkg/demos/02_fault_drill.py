"""Inject one fault of each kind into a short simulated trial and trace where each one surfaced.

Run with ``python demos/02_fault_drill.py``.
"""
# %%
from trialfidelity.trial_sim import FaultPlan, TrialConfig, run_trial

plan = FaultPlan.from_list([
    {"day": 3, "fault_kind": "sensor_timeout", "scope": {"participant": 3}},
    {"day": 4, "fault_kind": "rate_limited_empty", "scope": {"participant": 1}},
    {"day": 5, "fault_kind": "malformed_payload", "scope": {"participant": 2}},
    {"day": 6, "fault_kind": "store_write_fail", "scope": {"participant": 4}},
    {"day": 6, "fault_kind": "store_read_fail", "scope": {"participant": 0}},
    {"day": 8, "fault_kind": "controller_timeout_blank_schedule", "scope": {"participants": [0, 1]}},
    {"day": 9, "fault_kind": "unknown_participant_call", "scope": {"participant": 2}},
    {"day": 7, "fault_kind": "malformed_payload", "scope": {"phase": "update"}},
    {"day": 35, "fault_kind": "store_write_fail", "scope": {"phase": "update"}},
])

# %%
result = run_trial(TrialConfig(n_participants=10, seed=0), None, plan)
print(f"{result.summary['decision_points']} decision points, "
      f"{result.summary['fallback_schedules']} fallback schedules")

# %% [markdown]
# Each fired fault should leave exactly one alert or ledger entry behind.

# %%
attribution = result.attribution()
print(f"{'fault':5} {'kind':34} {'phase':8} {'day':>4}  surfaced as")
for ff in result.fired_faults:
    found = attribution[ff.fault.fault_id]
    labels = ", ".join(getattr(x, "check_id", None) and f"{x.severity}:{x.check_id}"
                       or f"ledger:{x.category}" for x in found)
    print(f"{ff.fault.fault_id:5} {ff.fault.fault_kind:34} {ff.phase:8} {ff.ts // 1440:4d}  {labels}")

# %% [markdown]
# The blank-schedule incident names the affected decision times so a later
# analysis can account for prompts that were scheduled but never shown.

# %%
for e in result.ledger.entries:
    if e.category == "blank_schedule":
        print(e.payload["affected"])
