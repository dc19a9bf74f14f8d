"""Per-participant action schedules.

A schedule covers 140 decision times from the moment it is formed. Offsets 0
and 1 use the participant's actual states, offsets 2..27 use the modified
state (frozen brushing average, app engagement imputed as 0), and everything
after runs at probability 0.5. The uniform fallback is 0.5 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ProbabilityRangeError
from .model_core import PosteriorState, StateVector, marginal_advantage_posterior
from .policy import DEFAULT_QUAD_NODES, LogisticParams, action_selection_prob, sample_actions
from .seeding import entry_seeds
from .state_reward import build_modified_state, propagate_a_bar

SCHEDULE_LENGTH = 140
ACTUAL_OFFSETS = 2
PERSONALIZED_OFFSETS = 28  # offsets 0..27 use actual or modified states
FIXED_PI = 0.5

STANDARD = "standard"
FALLBACK_UNIFORM = "fallback_uniform"


def state_kind_for_offset(offset: int) -> str:
    if offset < ACTUAL_OFFSETS:
        return "actual"
    if offset < PERSONALIZED_OFFSETS:
        return "modified"
    return "fixed"


def probability_in_range(pi: float, state_kind: str, params: LogisticParams) -> bool:
    if not math.isfinite(pi):
        return False
    if state_kind == "fixed":
        return pi == FIXED_PI
    return params.l_min <= pi <= params.l_max


@dataclass(frozen=True)
class ScheduleEntry:
    offset: int
    pi: float
    action: int
    state_kind: str
    seed: int
    policy_version: str


@dataclass(frozen=True)
class ActionSchedule:
    participant_id: int
    formed_at: int
    kind: str
    schedule_seed: int
    policy_version: str
    pis: np.ndarray
    actions: np.ndarray
    seeds: np.ndarray
    states: tuple[StateVector, ...] = field(default=())

    def __post_init__(self):
        for name in ("pis", "actions", "seeds"):
            arr = getattr(self, name)
            if len(arr) != SCHEDULE_LENGTH:
                raise ValueError(f"{name} must have {SCHEDULE_LENGTH} entries")

    def state_kind(self, offset: int) -> str:
        return "fixed" if self.kind == FALLBACK_UNIFORM else state_kind_for_offset(offset)

    @property
    def entries(self) -> list[ScheduleEntry]:
        return [
            ScheduleEntry(
                k, float(self.pis[k]), int(self.actions[k]), self.state_kind(k),
                int(self.seeds[k]), self.policy_version,
            )
            for k in range(SCHEDULE_LENGTH)
        ]

    def to_response(self) -> dict:
        """API response body: ``{"schedule": [{offset, pi, action, seed, policy_version, state_kind}]}``."""
        return {
            "schedule": [
                {
                    "offset": e.offset,
                    "pi": e.pi,
                    "action": e.action,
                    "seed": e.seed,
                    "policy_version": e.policy_version,
                    "state_kind": e.state_kind,
                }
                for e in self.entries
            ]
        }

    def to_record(self) -> dict:
        """Compact log payload; per-entry seeds are re-derived from ``schedule_seed``."""
        n_personal = len(self.states)
        return {
            "formed_at": self.formed_at,
            "schedule_kind": self.kind,
            "schedule_seed": self.schedule_seed,
            "states": [s.to_list() for s in self.states],
            "pis": [float(p) for p in self.pis[:n_personal]],
            "actions": "".join(str(int(a)) for a in self.actions),
        }


def build_full_schedule(
    participant_id: int,
    formed_at: int,
    current_states: tuple[StateVector, StateVector],
    posterior: PosteriorState,
    params: LogisticParams,
    schedule_seed: int,
    prompt_history: Sequence[int] = (),
    quad_nodes: int = DEFAULT_QUAD_NODES,
) -> ActionSchedule:
    """Standard schedule formed at decision index ``formed_at``.

    ``current_states`` are the actual states for offsets 0 and 1. For offsets
    2..27 the brushing average is frozen at offset 0's value, app engagement
    is 0, time of day alternates and the dosage average is rolled forward
    through this schedule's own sampled actions on top of ``prompt_history``.

    Raises ``ProbabilityRangeError`` (or whatever the probability computation
    raises) instead of returning a partial schedule.
    """
    seeds = entry_seeds(schedule_seed, SCHEDULE_LENGTH)
    beta = marginal_advantage_posterior(posterior)
    first, second = current_states
    history = list(prompt_history)

    states: list[StateVector] = []
    pis = np.full(SCHEDULE_LENGTH, FIXED_PI)
    actions = np.zeros(SCHEDULE_LENGTH, dtype=np.int8)
    for k in range(PERSONALIZED_OFFSETS):
        if k == 0:
            state = first
        elif k == 1:
            state = second
        else:
            tod = (first.time_of_day + k) % 2
            state = build_modified_state(first.b_bar, tod, propagate_a_bar(history, actions[:k]))
        pi = action_selection_prob(state, beta, params, quad_nodes)
        if not probability_in_range(pi, state_kind_for_offset(k), params):
            raise ProbabilityRangeError(
                f"pi={pi} outside [{params.l_min}, {params.l_max}] at offset {k}",
                pi=pi, offset=k, state_kind=state_kind_for_offset(k),
            )
        states.append(state)
        pis[k] = pi
        actions[k] = sample_actions(pis[k : k + 1], seeds[k : k + 1])[0]
    actions[PERSONALIZED_OFFSETS:] = sample_actions(
        pis[PERSONALIZED_OFFSETS:], seeds[PERSONALIZED_OFFSETS:]
    )
    return ActionSchedule(
        participant_id, formed_at, STANDARD, schedule_seed, posterior.version_id,
        pis, actions, seeds, tuple(states),
    )


def fallback_uniform_schedule(
    participant_id, formed_at: int, schedule_seed: int, policy_version: str = "fallback"
) -> ActionSchedule:
    seeds = entry_seeds(schedule_seed, SCHEDULE_LENGTH)
    pis = np.full(SCHEDULE_LENGTH, FIXED_PI)
    return ActionSchedule(
        participant_id, formed_at, FALLBACK_UNIFORM, schedule_seed, policy_version,
        pis, sample_actions(pis, seeds), seeds, (),
    )
