# %% [markdown]
# # Coverage selection by hand
#
# Scores go into K equal-width bins. The emptiest bin is served first, and each
# visit takes an equal share of what remains of the budget.

# %%
import numpy as np

from influprune.selection import ScoreRecord, SelectionConfig, assign_bins, coverage_select

rng = np.random.default_rng(0)
scores = np.concatenate([rng.normal(0, 1, 900), rng.normal(6, 0.3, 100)])
records = [ScoreRecord(f"u{i}#0", 0.0, 0.0, float(s)) for i, s in enumerate(scores)]

# %%
sub = coverage_select(records, SelectionConfig(budget=50, n_groups=10, seed=0))
[(round(g["lo"], 2), g["size"], g["taken"]) for g in sub.groups]

# %% [markdown]
# Compare with top-k on the same scores: every pick lands in the tail.

# %%
top = np.argsort(-scores)[:50]
np.histogram(scores[top], bins=np.linspace(scores.min(), scores.max(), 11))[0]

# %%
len(sub.selected), len(set(sub.selected))
