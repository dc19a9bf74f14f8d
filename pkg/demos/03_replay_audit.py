"""Write a trial log to disk, replay it, then tamper with one record and watch replay catch it.

Run with ``python demos/03_replay_audit.py``.
"""
# %%
import dataclasses
import tempfile
from pathlib import Path

from trialfidelity.errors import ReplayMismatch
from trialfidelity.service import EventStore, replay
from trialfidelity.trial_sim import TrialConfig, run_trial

workdir = Path(tempfile.mkdtemp())
log = workdir / "events.jsonl"
run_trial(TrialConfig(n_participants=10, seed=2), log_path=log)
records = EventStore.load(log)
print(f"{len(records)} records in {log}")

# %% [markdown]
# Every schedule is recomputed from logged posteriors, states and seeds.

# %%
outcomes = replay(records)
print(f"replayed {len(outcomes)} decisions; first pi={outcomes[0].pi:.3f}, action={outcomes[0].action}")

# %% [markdown]
# Change a single seed halfway through the log.

# %%
idx = [i for i, r in enumerate(records) if r.kind == "schedule_built"][len(outcomes) // 2]
bad = dict(records[idx].payload, schedule_seed=records[idx].payload["schedule_seed"] + 1)
tampered = list(records)
tampered[idx] = dataclasses.replace(records[idx], payload=bad)
try:
    replay(tampered)
except ReplayMismatch as exc:
    print(f"caught: seq {exc.seq} (tampered record was seq {records[idx].seq}): {exc}")
