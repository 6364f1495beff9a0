# %% [markdown]
# # Influence on a convex toy
#
# With the input embeddings frozen, the surrogate loss is convex in the output table,
# so the Hessian can be formed exactly and the stochastic inverse-HVP compared against it.

# %%
import numpy as np
from scipy.stats import spearmanr

from influprune.influence import HvpConfig, estimate_ihvp, exact_ihvp_oracle, influence_scores, loo_oracle
from influprune.toy import convex_toy

toy = convex_toy(seed=0)
toy.params.dim, len(toy.train), toy.damping

# %% [markdown]
# Average training gradient, then one solve each way.

# %%
v = toy.params.mean_gradient(toy.train)
exact = exact_ihvp_oracle(toy.params, toy.train, v, damping=toy.damping)
cfg = HvpConfig(iterations=5000, repeats=4, batch_size=8, damping=toy.damping)
est = estimate_ihvp(toy.params, toy.train, v, cfg)
np.linalg.norm(est - exact) / np.linalg.norm(exact)

# %% [markdown]
# Scores for all 200 samples reuse that single solve.
# Retraining without 30 of them gives the ground truth ranking.

# %%
res = influence_scores(toy.params, toy.train, cfg)
probe = list(toy.train.ids[:30])
loo = loo_oracle(toy.train, toy.n_items, toy.surrogate_cfg, toy.train_cfg, probe, base=toy.params)
spearmanr([res.scores[p] for p in probe], [loo.changes[p] for p in probe])[0]

# %%
res.diagnostics
