"""Online Thompson-sampling runtime for micro-randomized mobile-health trials.

The package pairs an action-centered Bayesian bandit with the operational
machinery a deployed trial needs: full-schedule fallbacks, an append-only log
that supports exact replay, red/yellow/green monitoring, and a simulated trial
with fault injection.
"""

from .errors import *  # noqa: F401,F403
from .model_core import (
    PosteriorState,
    PriorSpec,
    StateVector,
    TrainingTuple,
    build_design_row,
    marginal_advantage_posterior,
    posterior_update,
    predict_reward_mean,
)
from .monitoring import Alert, LedgerEntry, Monitor, PromptThresholds, classify_failure
from .policy import (
    LogisticParams,
    action_selection_prob,
    mc_action_selection_prob,
    rho,
    sample_action,
)
from .scheduler import ActionSchedule, build_full_schedule, fallback_uniform_schedule
from .service import EventStore, RLService, ServiceConfig, replay
from .state_reward import (
    CostParams,
    SensorWindow,
    build_modified_state,
    build_state,
    compute_cost,
    compute_reward,
    exponential_average,
)

__version__ = "0.1.0"

__all__ = [
    "PosteriorState", "PriorSpec", "StateVector", "TrainingTuple", "build_design_row",
    "marginal_advantage_posterior", "posterior_update", "predict_reward_mean",
    "Alert", "LedgerEntry", "Monitor", "PromptThresholds", "classify_failure",
    "LogisticParams", "action_selection_prob", "mc_action_selection_prob", "rho", "sample_action",
    "ActionSchedule", "build_full_schedule", "fallback_uniform_schedule",
    "EventStore", "RLService", "ServiceConfig", "replay",
    "CostParams", "SensorWindow", "build_modified_state", "build_state", "compute_cost",
    "compute_reward", "exponential_average",
]
