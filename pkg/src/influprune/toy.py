"""Small convex problems on which the influence estimates can be checked
against explicit Hessian solves and leave-one-out retraining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .dataset import SequenceBatch, build_sequences, generate_synthetic, SplitSpec
from .influence import HvpConfig, estimate_ihvp, exact_ihvp_oracle, influence_scores, loo_oracle, parameter_change
from .surrogate import SurrogateConfig, SurrogateParams, TrainConfig, train_surrogate

__all__ = ["ConvexToy", "convex_toy", "validate"]


@dataclass
class ConvexToy:
    train: SequenceBatch
    n_items: int
    surrogate_cfg: SurrogateConfig
    train_cfg: TrainConfig
    params: SurrogateParams

    @property
    def damping(self) -> float:
        # damping equal to the training L2 penalty makes H + damping*I the
        # exact Hessian of the regularised objective
        return self.train_cfg.weight_decay


def convex_toy(seed: int = 0, n_train: int = 200, n_items: int = 50, embed_dim: int = 8) -> ConvexToy:
    """Convex-mode surrogate trained to convergence on ``n_train`` synthetic samples."""
    n_users = max(2, n_train // 2)
    while True:
        log = generate_synthetic(n_users=n_users, n_items=n_items, density=0.12, drift=0.0, seed=seed)
        ds = build_sequences(log, SplitSpec(ratios=(1.0, 0.0, 0.0), rating_threshold=None), min_history=2)
        if len(ds.train) >= n_train:
            break
        n_users *= 2
    batch = ds.encode(ds.train[:n_train])
    scfg = SurrogateConfig(embed_dim=embed_dim, convex_mode=True, init_scale=1.0, seed=seed)
    tcfg = TrainConfig(epochs=3000, batch_size=1 << 30, learning_rate=1.0, weight_decay=0.01, seed=seed)
    params = train_surrogate(batch, scfg, tcfg, n_items=ds.n_items)
    return ConvexToy(batch, ds.n_items, scfg, tcfg, params)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def validate(seed: int = 0, n_probes: int = 30, hvp: HvpConfig | None = None) -> dict:
    """Oracle suite: inverse-HVP error, LOO rank agreement and parameter-change cosine."""
    toy = convex_toy(seed)
    hvp = hvp or HvpConfig(iterations=5000, repeats=4, batch_size=8, seed=seed, damping=toy.damping)
    model, train = toy.params, toy.train
    v = model.mean_gradient(train)
    exact = exact_ihvp_oracle(model, train, v, damping=hvp.damping)
    est = estimate_ihvp(model, train, v, hvp)
    res = influence_scores(model, train, hvp)

    rng = np.random.default_rng(seed)
    probe = [train.ids[i] for i in sorted(rng.choice(len(train), size=n_probes, replace=False))]
    loo = loo_oracle(train, toy.n_items, toy.surrogate_cfg, toy.train_cfg, probe, base=model)
    rho = spearmanr([res.scores[p] for p in probe], [loo.changes[p] for p in probe])[0]

    pos = {sid: i for i, sid in enumerate(train.ids)}
    cosines = []
    for sid in probe[:10]:
        pred = parameter_change(model, train, pos[sid], hvp)
        true = loo.deltas[sid]
        cosines.append(float(pred @ true / np.linalg.norm(pred) / np.linalg.norm(true)))
    return {
        "seed": seed,
        "n_train": len(train),
        "dim": model.dim,
        "ihvp_relative_error": _rel(est, exact),
        "spearman_influence_vs_loo": float(rho),
        "min_parameter_change_cosine": min(cosines),
        "loo_unconverged": loo.flagged,
    }
