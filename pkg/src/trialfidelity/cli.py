"""Command line: simulate, replay, report, validate.

Exit codes: 0 clean, 1 configuration or IO error, 2 the run raised red
alerts, 3 replay mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ReplayMismatch, StoreReadError
from .monitoring import RED, PromptThresholds
from .service import SCHEDULE_KINDS, EventStore, ServiceConfig, replay
from .state_reward import WINDOW
from .trial_sim import FaultPlan, TrialConfig, run_trial

EXIT_OK, EXIT_CONFIG, EXIT_RED, EXIT_MISMATCH = 0, 1, 2, 3

EVENTS_FILE = "events.jsonl"
LEDGER_FILE = "ledger.json"
SUMMARY_FILE = "summary.json"


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _load_configs(args) -> tuple[ServiceConfig, TrialConfig, FaultPlan]:
    service = ServiceConfig.load(args.config) if args.config else ServiceConfig()
    trial = TrialConfig.load(args.trial) if args.trial else TrialConfig()
    faults = FaultPlan.load(args.faults) if args.faults else FaultPlan()
    return service, trial, faults


def cmd_simulate(args) -> int:
    try:
        service, trial, faults = _load_configs(args)
        if args.seed is not None:
            trial = dataclasses.replace(trial, seed=args.seed)
            service = dataclasses.replace(service, trial_seed=args.seed)
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} is not a directory")
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        result = run_trial(trial, service, faults, log_path=out / EVENTS_FILE)
        (out / LEDGER_FILE).write_text(json.dumps(result.ledger.export(), indent=2, sort_keys=True))
        (out / SUMMARY_FILE).write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    except OSError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    counts = result.summary["alerts"]
    print(f"{result.summary['decision_points']} decision points, "
          f"{result.summary['update_attempts']} update attempts, "
          f"alerts red={counts[RED]} yellow={counts['yellow']}")
    return EXIT_RED if counts[RED] else EXIT_OK


def cmd_replay(args) -> int:
    try:
        records = EventStore.load(args.log)
    except StoreReadError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    try:
        outcomes = replay(records)
    except ReplayMismatch as exc:
        print(f"replay mismatch at seq {exc.seq}: {exc}")
        return EXIT_MISMATCH
    print(f"replayed {len(outcomes)} decisions, all reproduced")
    return EXIT_OK


# ---------------------------------------------------------------- report


def build_report(records, ledger_doc: dict) -> dict:
    """Report document computed from the event log and the ledger export alone."""
    thresholds = PromptThresholds()
    for r in records:
        if r.kind == "policy_update_succeeded" and r.payload.get("initial"):
            thresholds = PromptThresholds(**r.payload["config"]["thresholds"])
            break

    served: dict[int, list[tuple[int, int]]] = {}
    pis: dict[int, list[float]] = {}
    for r in records:
        if r.kind in SCHEDULE_KINDS and r.payload.get("formed_at") is not None:
            served.setdefault(r.participant_id, []).append(
                (int(r.payload["formed_at"]), int(r.payload["actions"][0])))
            if r.kind == "schedule_built":
                pis.setdefault(r.participant_id, []).append(float(r.payload["pis"][0]))

    participants = {}
    n_out = 0
    for pid in sorted(served, key=lambda p: (str(type(p)), p)):
        by_index = dict(served[pid])
        n_weeks = -(-(max(by_index) + 1) // WINDOW)
        weeks = []
        for w in range(n_weeks):
            count = sum(by_index.get(t, 0) for t in range(w * WINDOW, (w + 1) * WINDOW))
            ok = thresholds.min_weekly <= count <= thresholds.max_weekly
            n_out += not ok
            weeks.append({"week": w, "prompts": count, "within_thresholds": ok})
        traj = pis.get(pid, [])
        participants[str(pid)] = {
            "prompts_total": sum(by_index.values()),
            "weekly_prompts": weeks,
            "pi": _pi_summary(traj),
        }

    alerts = [
        {"ts": r.ts, "participant_id": r.participant_id, "severity": r.payload["severity"],
         "check_id": r.payload["check_id"]}
        for r in records if r.kind == "alert"
    ]
    updates = [
        {"ts": r.ts, "outcome": "succeeded" if r.kind == "policy_update_succeeded" else "skipped",
         "policy_version": r.policy_version,
         "reason": r.payload.get("reason")}
        for r in records
        if r.kind in ("policy_update_succeeded", "policy_update_skipped")
        and not r.payload.get("initial")
    ]
    incidents = list(ledger_doc.get("blank_schedule_incidents", [])) + \
        list(ledger_doc.get("api_call_failures", [])) + \
        list(ledger_doc.get("affected_decision_times", []))
    return {
        "thresholds": {"min_weekly": thresholds.min_weekly, "max_weekly": thresholds.max_weekly},
        "participants": participants,
        "weeks_out_of_thresholds": n_out,
        "alerts": alerts,
        "updates": updates,
        "incidents": incidents,
    }


def _pi_summary(traj: list[float]) -> dict:
    if not traj:
        return {"n": 0, "first": None, "last": None, "mean": None, "min": None, "max": None}
    arr = np.asarray(traj)
    return {"n": len(traj), "first": traj[0], "last": traj[-1], "mean": float(arr.mean()),
            "min": float(arr.min()), "max": float(arr.max())}


def render_text(report: dict) -> str:
    th = report["thresholds"]
    lines = [f"Weekly prompt thresholds: [{th['min_weekly']}, {th['max_weekly']}]",
             f"Participant-weeks outside thresholds: {report['weeks_out_of_thresholds']}", ""]
    lines.append("participant  prompts  weeks(out)  pi_first  pi_last  pi_mean")
    for pid, p in report["participants"].items():
        n_out = sum(not w["within_thresholds"] for w in p["weekly_prompts"])
        pi = p["pi"]
        fmt = (lambda v: "   -   " if v is None else f"{v:7.3f}")
        lines.append(f"{pid:>11}  {p['prompts_total']:7d}  {len(p['weekly_prompts']):5d}({n_out})"
                     f"  {fmt(pi['first'])}  {fmt(pi['last'])}  {fmt(pi['mean'])}")
    lines += ["", f"Alerts ({len(report['alerts'])}):"]
    lines += [f"  ts={a['ts']} {a['severity']:6s} {a['check_id']} participant={a['participant_id']}"
              for a in report["alerts"]]
    lines += ["", f"Updates ({len(report['updates'])}):"]
    lines += [f"  ts={u['ts']} {u['outcome']} {u['policy_version']}"
              + (f" reason={u['reason']}" if u["reason"] else "") for u in report["updates"]]
    lines += ["", f"Documented incidents ({len(report['incidents'])}):"]
    for inc in report["incidents"]:
        lines.append(f"  ts={inc['timestamp']} {inc['category']}")
        for a in inc["payload"].get("affected", []):
            lines.append(f"    participant {a['participant_id']} decision {a['decision_index']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    try:
        records = EventStore.load(args.log)
        ledger_doc = json.loads(Path(args.ledger).read_text())
        if not isinstance(ledger_doc, dict):
            raise ValueError("ledger export must be a JSON object")
        report = build_report(records, ledger_doc)
    except (StoreReadError, OSError, ValueError, KeyError, TypeError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if args.format == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(render_text(report))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        _load_configs(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    print("configuration valid")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trialfidelity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a simulated trial")
    p.add_argument("--config", help="service config JSON (defaults if omitted)")
    p.add_argument("--trial", help="trial config JSON (defaults if omitted)")
    p.add_argument("--faults", help="fault plan JSON list")
    p.add_argument("--seed", type=int, help="overrides the trial and service seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="recompute every logged decision")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="summarize a log and ledger export")
    p.add_argument("--log", required=True)
    p.add_argument("--ledger", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check configuration files")
    p.add_argument("--config", help="service config JSON")
    p.add_argument("--trial", help="trial config JSON")
    p.add_argument("--faults", help="fault plan JSON list")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
