"""Influence of removing a training sample on the empirical risk.

The score of sample ``s`` is ``(1/n) * g_s . ihvp`` where ``g_s`` is its loss
gradient at the trained surrogate and ``ihvp = (H + damping*I)^{-1} v_bar``
with ``v_bar`` the mean training gradient. Because the inverse Hessian is
symmetric, a single inverse-HVP solve serves every sample.

Sign convention: a positive score means removing the sample *increases* the
mean training loss, i.e. the sample is helpful.

The solver is a stochastic truncated Neumann series::

    h_0 = v
    h_t = v + h_{t-1} - (H_{s_t} h_{t-1} + damping * h_{t-1}) / scale
    ihvp ~= h_T / scale

where ``H_{s_t}`` is the Hessian of a random mini-batch. It converges when
``scale`` exceeds the largest eigenvalue of ``H + damping*I``.

Any model exposing ``dim``, ``losses(batch)``, ``gradients(batch)``,
``mean_gradient(batch)``, ``hvp(batch, v)`` and ``hessian(batch)`` works;
:class:`~influprune.surrogate.SurrogateParams` is the reference one.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import SequenceBatch
from .surrogate import SurrogateConfig, SurrogateParams, TrainConfig, train_surrogate

logger = logging.getLogger(__name__)

__all__ = [
    "HvpConfig",
    "InfluenceResult",
    "IhvpDivergenceError",
    "average_gradient",
    "estimate_ihvp",
    "influence_scores",
    "parameter_change",
    "exact_ihvp_oracle",
    "naive_influence_scores",
    "LooResult",
    "loo_oracle",
    "write_influence",
    "read_influence",
]


class IhvpDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class HvpConfig:
    iterations: int = 5000
    damping: float = 0.01
    scale: float = 10.0
    repeats: int = 1
    batch_size: int = 1
    seed: int = 0
    max_retries: int = 4
    divergence_factor: float = 1e6

    def __post_init__(self):
        if self.iterations < 0 or self.damping < 0 or self.scale <= 0:
            raise ValueError(f"invalid solver settings {self}")
        if self.repeats < 1 or self.batch_size < 1:
            raise ValueError("repeats and batch_size must be >= 1")


@dataclass
class InfluenceResult:
    scores: dict[str, float]
    ihvp: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"sample_id": sid, "user_id": sid.split("#")[0], "influence": float(v)}) + "\n"
            for sid, v in self.scores.items()
        )


def average_gradient(model, train: SequenceBatch) -> np.ndarray:
    """Mean per-sample gradient ``v_bar`` over the training set."""
    if len(train) == 0:
        raise ValueError("empty training set")
    return model.mean_gradient(train)


def _recursion(model, train, v, cfg: HvpConfig, scale: float, rng, norms: list | None):
    n = len(train)
    if hasattr(model, "curvature"):
        hvp = model.curvature(train)
    else:
        def hvp(idx, x):
            return model.hvp(train.take(idx), x)
    limit = cfg.divergence_factor * np.linalg.norm(v)
    h = v.copy()
    for t in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        h = v + h - (hvp(idx, h) + cfg.damping * h) / scale
        hn = float(np.linalg.norm(h))
        if not np.isfinite(hn) or hn > limit:
            raise IhvpDivergenceError(f"iterate norm {hn:.3g} at step {t} (scale={scale:g})")
        if norms is not None and t % 100 == 0:
            norms.append(hn)
    return h / scale


def estimate_ihvp(model, train: SequenceBatch, v, cfg: HvpConfig = HvpConfig(), diagnostics: dict | None = None):
    """Stochastic estimate of ``(H + damping*I)^{-1} v``.

    On divergence the scale is doubled and the repeat restarted, up to
    ``cfg.max_retries`` times. ``diagnostics`` (if given) receives the iterate
    norm trajectory every 100 steps, the final scale and solver-call counts.
    """
    v = np.asarray(v, dtype=np.float64)
    diag = diagnostics if diagnostics is not None else {}
    diag.setdefault("solver_calls", 0)
    diag.setdefault("retries", 0)
    diag.setdefault("norms", [])
    if not np.all(np.isfinite(v)):
        raise ValueError("v must be finite")
    if not np.any(v):
        diag["scale"] = cfg.scale
        return np.zeros_like(v)
    if cfg.iterations == 0:
        warnings.warn("iterations=0: returning v / scale", RuntimeWarning, stacklevel=2)
        diag["scale"] = cfg.scale
        return v / cfg.scale

    rng = np.random.default_rng(cfg.seed)
    scale = cfg.scale
    total = np.zeros_like(v)
    for rep in range(cfg.repeats):
        for attempt in range(cfg.max_retries + 1):
            norms: list[float] = []
            state = rng.bit_generator.state
            try:
                diag["solver_calls"] += 1
                total += _recursion(model, train, v, cfg, scale, rng, norms)
                break
            except IhvpDivergenceError as exc:
                if attempt == cfg.max_retries:
                    raise IhvpDivergenceError(
                        f"{exc}; still diverging after {cfg.max_retries} retries - "
                        "increase HvpConfig.scale or damping"
                    ) from exc
                logger.warning("%s; retrying with scale %g", exc, 2 * scale)
                diag["retries"] += 1
                rng.bit_generator.state = state
                scale *= 2
        diag["norms"].append(norms)
    diag["scale"] = scale
    return total / cfg.repeats


def influence_scores(
    model, train: SequenceBatch, cfg: HvpConfig = HvpConfig(), v: np.ndarray | None = None
) -> InfluenceResult:
    """Scores for every training sample from exactly one inverse-HVP solve."""
    n = len(train)
    diag: dict = {}
    t0 = time.perf_counter()
    if v is None:
        v = average_gradient(model, train)
    ihvp = estimate_ihvp(model, train, v, cfg, diagnostics=diag)
    t1 = time.perf_counter()
    scores = _project(model, train, ihvp) / n
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite influence score")
    diag["solve_seconds"] = t1 - t0
    diag["project_seconds"] = time.perf_counter() - t1
    return InfluenceResult(dict(zip(train.ids, scores.tolist())), ihvp, diag)


def _project(model, train: SequenceBatch, vec: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(train))
    for start in range(0, len(train), chunk):
        idx = np.arange(start, min(start + chunk, len(train)))
        out[idx] = model.gradients(train.take(idx)) @ vec
    return out


def parameter_change(model, train: SequenceBatch, index: int, cfg: HvpConfig = HvpConfig()) -> np.ndarray:
    """Predicted ``theta_{-s} - theta`` for removing training sample ``index``."""
    g = model.gradients(train.take([index]))[0]
    return estimate_ihvp(model, train, g, cfg) / len(train)


def exact_ihvp_oracle(model, train: SequenceBatch, v, damping: float = 0.01, max_dim: int = 2000) -> np.ndarray:
    """Assemble ``H + damping*I`` explicitly and solve. Small models only."""
    if model.dim > max_dim:
        raise ValueError(f"dimension {model.dim} exceeds oracle limit {max_dim}")
    H = model.hessian(train) + damping * np.eye(model.dim)
    try:
        return np.linalg.solve(H, np.asarray(v, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"damped Hessian is singular: {exc}") from exc


def naive_influence_scores(model, train: SequenceBatch, damping: float = 0.01) -> np.ndarray:
    """Per-sample path: one exact solve ``H^{-1} g_s`` for every sample.

    ``score(s) = (1/n) * sum_i (1/n) g_i . H^{-1} g_s``
    """
    n = len(train)
    H = model.hessian(train) + damping * np.eye(model.dim)
    G = model.gradients(train)
    out = np.empty(n)
    for s in range(n):
        x = np.linalg.solve(H, G[s])
        out[s] = (G @ x).sum() / n / n
    return out


@dataclass
class LooResult:
    changes: dict[str, float]
    flagged: list[str]
    deltas: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def loo_oracle(
    train: SequenceBatch,
    n_items: int,
    cfg: SurrogateConfig,
    tcfg: TrainConfig,
    probe: Sequence[str],
    base: SurrogateParams | None = None,
    grad_tol: float = 1e-6,
) -> LooResult:
    """Leave-one-out retraining ground truth.

    For each probed sample id, retrain from the identical initialisation and
    schedule without it and report the change in mean training loss over the
    full set. Retrains whose regularised gradient norm exceeds ``grad_tol``
    are flagged as unconverged.
    """
    if base is None:
        base = train_surrogate(train, cfg, tcfg, n_items=n_items)
    risk = float(base.losses(train).mean())
    base_gnorm = np.linalg.norm(base.mean_gradient(train) + tcfg.weight_decay * base.theta)
    if base_gnorm > grad_tol:
        logger.warning("base model is not converged (gradient norm %.3g); LOO changes are unreliable", base_gnorm)
    pos = {sid: i for i, sid in enumerate(train.ids)}
    missing = [p for p in probe if p not in pos]
    if missing:
        raise KeyError(f"probe ids not in training set: {missing[:5]}")
    changes, flagged, deltas = {}, [], {}
    for sid in probe:
        keep = np.ones(len(train), dtype=bool)
        keep[pos[sid]] = False
        sub = train.take(keep)
        theta = train_surrogate(sub, cfg, tcfg, n_items=n_items)
        gnorm = np.linalg.norm(theta.mean_gradient(sub) + tcfg.weight_decay * theta.theta)
        if gnorm > grad_tol:
            flagged.append(sid)
        changes[sid] = float(theta.losses(train).mean()) - risk
        deltas[sid] = theta.theta - base.theta
    return LooResult(changes, flagged, deltas)


def write_influence(result: InfluenceResult, path, diagnostics_path=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.to_jsonl())
    if diagnostics_path is not None:
        diag = {k: v for k, v in result.diagnostics.items() if not k.endswith("_seconds")}
        with open(diagnostics_path, "w", encoding="utf-8") as fh:
            json.dump(diag, fh, indent=1, sort_keys=True)


def read_influence(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        return {rec["sample_id"]: rec["influence"] for rec in map(json.loads, fh) if rec}
