"""From prior to a served schedule, one participant at a time.

Run with ``python demos/01_policy_walkthrough.py``.
"""
# %%
import numpy as np

from trialfidelity import (
    LogisticParams,
    PriorSpec,
    StateVector,
    TrainingTuple,
    action_selection_prob,
    build_full_schedule,
    marginal_advantage_posterior,
    posterior_update,
    rho,
)
from trialfidelity.model_core import PosteriorState
from trialfidelity.seeding import derive_seed

# %% [markdown]
# The link squashes an advantage estimate into a prompt probability that
# never leaves [l_min, l_max].

# %%
params = LogisticParams()
for x in (-50, -1, 0, 1, 50):
    print(f"rho({x:+d}) = {rho(float(x), params):.4f}")

# %% [markdown]
# Start at the prior. With a zero-mean advantage, every probability is 1/2.

# %%
prior = PriorSpec.default()
post = PosteriorState.from_prior(prior)
evening = StateVector(1.0, 1, 0.4, 0.3, 1)
print("prior pi (evening):", action_selection_prob(evening, marginal_advantage_posterior(post), params))

# %% [markdown]
# Feed ten weeks of data where evening prompts add 8 seconds of brushing
# and morning prompts cost 8. The prior is wide so the 90-second baseline
# lands in the baseline block instead of leaking into the advantage.

# %%
rng = np.random.default_rng(0)
batch = []
for t in range(140):
    state = StateVector(1.0, t % 2, rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.6), int(rng.integers(2)))
    action = int(rng.integers(2))
    reward = 90 + action * (8 if state.time_of_day else -8) + rng.normal(0, 5)
    batch.append(TrainingTuple(0, t, state, 0.5, action, reward))
post = posterior_update(PriorSpec.default(prior_scale=1e4, noise_var=25.0), batch)
beta = marginal_advantage_posterior(post)
print("advantage mean:", np.round(beta[0], 2))
for tod, name in ((0, "morning"), (1, "evening")):
    s = StateVector(1.0, tod, 0.4, 0.3, 1)
    print(f"{name} pi: {action_selection_prob(s, beta, params):.3f}")

# %% [markdown]
# A served schedule covers 140 decision times. The first two use the real
# state, the next 26 an imputed one, and the rest are a fixed coin flip.

# %%
sched = build_full_schedule(0, 14, (StateVector(1.0, 0, 0.4, 0.3, 1), evening), post, params,
                            derive_seed(0, 0, 14), prompt_history=[b.action for b in batch])
print("offsets 0-5   :", np.round(sched.pis[:6], 3))
print("offsets 26-31 :", np.round(sched.pis[26:32], 3))
print("actions 0-27  :", "".join(map(str, sched.actions[:28])))
