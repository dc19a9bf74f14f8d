"""State features and the cost-adjusted reward."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import DataUnavailableError, InvalidInputError
from .model_core import StateVector

WINDOW = 14  # 7 days x 2 decision times
GAMMA = 13.0 / 14.0
MAX_BRUSH_SECONDS = 180.0


@dataclass(frozen=True)
class SensorWindow:
    """Raw inputs for one participant at one decision time.

    Missing sessions are ``None``; ``0.0`` means the participant did not brush.
    """

    brushing_quality_history: tuple[Optional[float], ...] = ()
    prompts_sent_history: tuple[int, ...] = ()
    app_opened_prior_day: Optional[int] = None
    latest_brushing_quality: Optional[float] = None

    def __post_init__(self):
        for q in self.brushing_quality_history:
            if q is not None and not (math.isfinite(q) and q >= 0):
                raise InvalidInputError(f"brushing seconds must be finite and >= 0, got {q}")
        for a in self.prompts_sent_history:
            if a not in (0, 1):
                raise InvalidInputError(f"prompt history entries must be 0 or 1, got {a}")
        if self.app_opened_prior_day not in (None, 0, 1):
            raise InvalidInputError("app_opened_prior_day must be 0, 1 or None")


@dataclass(frozen=True)
class CostParams:
    xi1: float = 1.0
    xi2: float = 1.0
    brush_threshold_b: float = 0.5
    dosage_threshold_a1: float = 0.5
    dosage_threshold_a2: float = 0.8

    def __post_init__(self):
        values = (self.xi1, self.xi2, self.brush_threshold_b,
                  self.dosage_threshold_a1, self.dosage_threshold_a2)
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError("cost parameters must be finite")
        if self.xi1 < 0 or self.xi2 < 0:
            raise InvalidInputError("xi1 and xi2 must be non-negative")
        for a in (self.dosage_threshold_a1, self.dosage_threshold_a2):
            if not 0.0 <= a <= 1.0:
                raise InvalidInputError("dosage thresholds must lie in [0, 1]")


@dataclass(frozen=True)
class RewardRecord:
    q: float
    cost: float
    reward: float
    components: dict = field(default_factory=dict)


def exponential_average(
    history: Sequence[Optional[float]], window: int = WINDOW, gamma: float = GAMMA
) -> float:
    """Normalized exponentially weighted mean of the last ``window`` entries.

    The newest entry gets weight 1, the one before ``gamma`` and so on. ``None``
    entries keep their slot but are dropped from both numerator and
    normalizer. An empty (or all-missing) history gives 0; see
    :func:`is_cold_start`.
    """
    if window < 1:
        raise InvalidInputError("window must be at least 1")
    recent = list(history)[-window:][::-1]
    num = 0.0
    den = 0.0
    seen = []
    for j, x in enumerate(recent):
        if x is None:
            continue
        w = gamma**j
        num += w * x
        den += w
        seen.append(x)
    if den == 0:
        return 0.0
    # a convex combination; clipping removes roundoff outside the data range
    return min(max(num / den, min(seen)), max(seen))


def is_cold_start(history: Sequence[Optional[float]], window: int = WINDOW) -> bool:
    return all(x is None for x in list(history)[-window:])


def brushing_quality(seconds: float) -> float:
    """Session brushing quality: seconds, truncated to ``[0, 180]``."""
    if not math.isfinite(seconds) or seconds < 0:
        raise InvalidInputError(f"invalid brushing duration {seconds}")
    return min(float(seconds), MAX_BRUSH_SECONDS)


def b_bar_from_history(history: Sequence[Optional[float]]) -> float:
    clipped = [None if q is None else brushing_quality(q) for q in history]
    return exponential_average(clipped) / MAX_BRUSH_SECONDS


def a_bar_from_history(history: Sequence[int]) -> float:
    return exponential_average([float(a) for a in history])


def build_state(window: SensorWindow, time_of_day: int) -> StateVector:
    if window.app_opened_prior_day is None:
        raise DataUnavailableError("prior-day app engagement is missing")
    return StateVector(
        1.0,
        int(time_of_day),
        b_bar_from_history(window.brushing_quality_history),
        a_bar_from_history(window.prompts_sent_history),
        int(window.app_opened_prior_day),
    )


def build_modified_state(frozen_b_bar: float, time_of_day: int, a_bar: float) -> StateVector:
    """State for schedule offsets beyond the first day: frozen brushing, no app engagement."""
    return StateVector(1.0, int(time_of_day), float(frozen_b_bar), float(a_bar), 0)


def cost_indicators(state: StateVector, params: CostParams) -> dict[str, int]:
    return {
        "b_bar_above_b": int(state.b_bar > params.brush_threshold_b),
        "a_bar_above_a1": int(state.a_bar > params.dosage_threshold_a1),
        "a_bar_above_a2": int(state.a_bar > params.dosage_threshold_a2),
    }


def compute_cost(state: StateVector, action: int, params: CostParams) -> float:
    if action not in (0, 1):
        raise InvalidInputError(f"action must be 0 or 1, got {action}")
    if action == 0:
        return 0.0
    ind = cost_indicators(state, params)
    return (
        params.xi1 * ind["b_bar_above_b"] * ind["a_bar_above_a1"]
        + params.xi2 * ind["a_bar_above_a2"]
    )


def compute_reward(q: float, cost: float, components: dict | None = None) -> RewardRecord:
    if not math.isfinite(q):
        raise InvalidInputError(f"q must be finite, got {q}")
    if not (math.isfinite(cost) and cost >= 0):
        raise InvalidInputError(f"cost must be finite and >= 0, got {cost}")
    return RewardRecord(float(q), float(cost), float(q) - float(cost), dict(components or {}))


def reward_for(state: StateVector, action: int, seconds: float, params: CostParams) -> RewardRecord:
    """Reward for one decision from the raw session duration, keeping every input."""
    q = brushing_quality(seconds)
    cost = compute_cost(state, action, params)
    components = {"raw_seconds": float(seconds), "action": int(action)}
    components.update(cost_indicators(state, params))
    return compute_reward(q, cost, components)


def propagate_a_bar(history: Sequence[int], scheduled: Sequence[int]) -> float:
    return a_bar_from_history(list(history) + list(scheduled))

