"""Overall scores and subset selection.

``overall = influence / n + lam * effort`` where ``influence`` is the stored
``(1/n) g_s . ihvp`` value, so the first term is the ``1/n^2``-scaled
influence of the combined score.

Coverage-enhanced selection splits the score range into ``K`` equal-width
bins, then repeatedly visits the smallest remaining bin, draws
``min(B, |bin|)`` members uniformly, and re-spreads the leftover budget over
the bins still to visit. Floors can leave it a few samples short, which are
topped up uniformly from the unselected pool.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import SequenceBatch

logger = logging.getLogger(__name__)

__all__ = [
    "ScoreRecord",
    "SelectionConfig",
    "Subset",
    "STRATEGIES",
    "overall_scores",
    "coverage_select",
    "baseline_select",
    "select",
    "assign_bins",
]

STRATEGIES = ("dealrec", "random", "grand", "el2n", "ccs")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    influence: float
    effort: float
    overall: float
    group_index: int = 0

    @property
    def user_id(self) -> str:
        return self.sample_id.split("#")[0]


@dataclass(frozen=True)
class SelectionConfig:
    """``budget`` is a ratio when given as a float in (0, 1], a count when an int."""

    budget: float | int = 0.02
    n_groups: int = 50
    lam: float = 0.5
    strategy: str = "dealrec"
    seed: int = 0
    binning: str = "width"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.n_groups < 1 or self.lam < 0:
            raise ValueError("n_groups must be >= 1 and lam >= 0")
        if self.binning not in ("width", "quantile"):
            raise ValueError(f"unknown binning {self.binning!r}")
        if isinstance(self.budget, float) and not 0.0 < self.budget <= 1.0:
            raise ValueError("a ratio budget must lie in (0, 1]")

    def resolve_budget(self, n: int) -> int:
        if isinstance(self.budget, float):
            k = max(1, math.floor(self.budget * n + 1e-9))
        else:
            k = int(self.budget)
        if not 1 <= k <= n:
            raise ValueError(f"budget {k} outside [1, {n}]")
        return k


@dataclass
class Subset:
    selected: list[str]
    strategy: str
    seed: int
    budget: int
    groups: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "strategy": self.strategy,
                "seed": self.seed,
                "budget": self.budget,
                "selected": self.selected,
                "groups": self.groups,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "Subset":
        obj = json.loads(text)
        return cls(obj["selected"], obj["strategy"], obj["seed"], obj["budget"], obj.get("groups", []))


def assign_bins(scores: np.ndarray, n_groups: int, binning: str = "width") -> tuple[np.ndarray, np.ndarray]:
    """Bin index per score and the ``n_groups + 1`` bin edges.

    Equal-width bins span ``[min, max]``; the maximum lands in the last bin.
    Constant scores all fall into bin 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if binning == "quantile":
        edges = np.quantile(scores, np.linspace(0, 1, n_groups + 1))
        idx = np.searchsorted(edges[1:-1], scores, side="right")
        return idx, edges
    edges = np.linspace(lo, hi, n_groups + 1)
    if hi == lo:
        return np.zeros(len(scores), dtype=np.int64), edges
    idx = np.floor((scores - lo) / (hi - lo) * n_groups).astype(np.int64)
    return np.clip(idx, 0, n_groups - 1), edges


def _stratified(scores, budget: int, n_groups: int, rng, binning: str = "width"):
    n = len(scores)
    if budget > n:
        raise ValueError(f"budget {budget} exceeds {n} samples")
    if n > 1 and np.ptp(scores) == 0:
        logger.warning("all scores identical; selection degenerates to uniform sampling")
    bins, edges = assign_bins(scores, n_groups, binning)
    members = [np.flatnonzero(bins == k) for k in range(n_groups)]
    taken = [0] * n_groups
    remaining = list(range(n_groups))
    chosen: list[int] = []
    per_group = budget // n_groups
    while remaining:
        # fewest members first, lower bin index on ties
        k = min(remaining, key=lambda g: (len(members[g]), g))
        draw = min(per_group, len(members[k]))
        if draw:
            chosen.extend(rng.choice(members[k], size=draw, replace=False).tolist())
        taken[k] = draw
        remaining.remove(k)
        if remaining:
            per_group = (budget - len(chosen)) // len(remaining)
    if len(chosen) < budget:
        pool = np.setdiff1d(np.arange(n), chosen)
        extra = rng.choice(pool, size=budget - len(chosen), replace=False)
        for i in extra:
            taken[bins[i]] += 1
        chosen.extend(extra.tolist())
    groups = [
        {"lo": float(edges[k]), "hi": float(edges[k + 1]), "size": len(members[k]), "taken": taken[k]}
        for k in range(n_groups)
    ]
    return chosen, bins, groups


def overall_scores(
    influence: Mapping[str, float], effort: Mapping[str, float], lam: float, n: int | None = None
) -> list[ScoreRecord]:
    """Combine stored influence and effort scores per sample."""
    if set(influence) != set(effort):
        diff = sorted(set(influence) ^ set(effort))
        raise KeyError(f"influence and effort cover different samples: {diff[:10]} ({len(diff)} total)")
    n = n or len(influence)
    records = []
    for sid, inf in influence.items():
        eff = effort[sid]
        overall = inf / n + lam * eff
        if not math.isfinite(overall):
            raise ValueError(f"non-finite overall score for {sid}")
        records.append(ScoreRecord(sid, float(inf), float(eff), float(overall)))
    return records


def coverage_select(records: Sequence[ScoreRecord], cfg: SelectionConfig) -> Subset:
    if not records:
        raise ValueError("no records to select from")
    scores = np.array([r.overall for r in records])
    budget = cfg.resolve_budget(len(records))
    rng = np.random.default_rng(cfg.seed)
    chosen, bins, groups = _stratified(scores, budget, cfg.n_groups, rng, cfg.binning)
    return Subset([records[i].sample_id for i in chosen], cfg.strategy, cfg.seed, budget, groups)


def _top(ids: Sequence[str], scores: np.ndarray, budget: int) -> list[str]:
    order = np.argsort(-scores, kind="stable")[:budget]
    return [ids[i] for i in order]


def baseline_select(strategy: str, train: SequenceBatch, cfg: SelectionConfig, surrogate=None) -> Subset:
    """Random, GraNd, EL2N and CCS baselines on the surrogate."""
    budget = cfg.resolve_budget(len(train))
    if strategy == "random":
        rng = np.random.default_rng(cfg.seed)
        picked = rng.choice(len(train), size=budget, replace=False)
        return Subset([train.ids[i] for i in picked], strategy, cfg.seed, budget)
    if strategy not in ("grand", "el2n", "ccs"):
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    if surrogate is None:
        raise ValueError(f"{strategy} needs a trained surrogate")
    if strategy == "grand":
        scores = np.linalg.norm(surrogate.gradients(train), axis=1)
        return Subset(_top(train.ids, scores, budget), strategy, cfg.seed, budget)
    err = surrogate.probabilities(train)
    err[np.arange(len(train)), train.targets] -= 1.0
    scores = np.linalg.norm(err, axis=1)
    if strategy == "el2n":
        return Subset(_top(train.ids, scores, budget), strategy, cfg.seed, budget)
    records = [ScoreRecord(sid, 0.0, 0.0, float(s)) for sid, s in zip(train.ids, scores)]
    return coverage_select(records, cfg)


def select(
    cfg: SelectionConfig,
    train: SequenceBatch,
    influence: Mapping[str, float] | None = None,
    effort: Mapping[str, float] | None = None,
    surrogate=None,
) -> Subset:
    """Dispatch on ``cfg.strategy``."""
    if cfg.strategy == "dealrec":
        if influence is None or effort is None:
            raise ValueError("dealrec needs influence and effort scores")
        return coverage_select(overall_scores(influence, effort, cfg.lam, len(train)), cfg)
    return baseline_select(cfg.strategy, train, cfg, surrogate)
