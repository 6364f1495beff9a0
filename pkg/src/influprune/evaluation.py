"""Recall@K / NDCG@K and the strategy x seed comparison harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, SequenceBatch
from .influence import HvpConfig, influence_scores
from .selection import SelectionConfig, select
from .surrogate import SurrogateConfig, TrainConfig, train_surrogate
from .target import TargetConfig, TargetParams, effort_scores, finetune_fewshot, pretrain_target

logger = logging.getLogger(__name__)

__all__ = [
    "RankingMetrics",
    "EvalReport",
    "ExperimentConfig",
    "target_ranks",
    "rank_and_score",
    "compare_selectors",
]


@dataclass
class RankingMetrics:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int
    n_skipped: int = 0

    def as_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "n_evaluated": self.n_evaluated,
            "n_skipped": self.n_skipped,
        }


def target_ranks(logits: np.ndarray, batch: SequenceBatch) -> np.ndarray:
    """1-based rank of each target among catalog items not in its history.

    Ties are broken by item index. History items other than the target are
    removed from the candidate list.
    """
    scores = np.array(logits, dtype=np.float64, copy=True)
    rows, cols = np.nonzero(batch.mask)
    items = batch.history[rows, cols]
    keep = items != batch.targets[rows]
    scores[rows[keep], items[keep]] = -np.inf
    n = len(batch)
    y = scores[np.arange(n), batch.targets][:, None]
    before = (scores > y) | ((scores == y) & (np.arange(scores.shape[1])[None, :] < batch.targets[:, None]))
    return before.sum(axis=1) + 1


def rank_and_score(params: TargetParams, test: SequenceBatch, ks=(10, 20)) -> RankingMetrics:
    if len(test) == 0:
        raise ValueError("empty evaluation set")
    known = test.targets >= 0
    skipped = int((~known).sum())
    if skipped:
        logger.warning("%d evaluation targets missing from the catalog were skipped", skipped)
        test = test.take(known)
    ranks = target_ranks(params.logits(test), test)
    recall, ndcg = {}, {}
    for k in sorted(ks):
        hit = ranks <= k
        recall[k] = float(hit.mean())
        ndcg[k] = float(np.where(hit, 1.0 / np.log2(1.0 + ranks), 0.0).mean())
    return RankingMetrics(recall, ndcg, len(test), skipped)


@dataclass(frozen=True)
class ExperimentConfig:
    surrogate: SurrogateConfig = SurrogateConfig()
    surrogate_train: TrainConfig = TrainConfig()
    hvp: HvpConfig = HvpConfig()
    target: TargetConfig = TargetConfig()
    finetune: TrainConfig = TrainConfig(epochs=20, batch_size=16, learning_rate=0.001, weight_decay=0.0)
    selection: SelectionConfig = SelectionConfig(budget=64)
    ks: tuple[int, ...] = (10, 20)
    lambda_grid: tuple[float, ...] = ()
    include_full: bool = False
    early_stopping: bool = True
    patience: int = 3


@dataclass
class EvalReport:
    runs: list[dict]
    timings: dict[str, float]
    ks: tuple[int, ...] = (10, 20)

    def strategies(self) -> list[str]:
        return list(dict.fromkeys(r["strategy"] for r in self.runs))

    def values(self, strategy: str, metric: str, k: int) -> np.ndarray:
        return np.array([
            r["metrics"][metric][str(k)]
            for r in self.runs
            if r["strategy"] == strategy and r["status"] == "ok"
        ])

    def summary(self) -> dict:
        out = {}
        for s in self.strategies():
            row = {}
            for metric in ("recall", "ndcg"):
                for k in self.ks:
                    v = self.values(s, metric, k)
                    row[f"{metric}@{k}"] = {
                        "mean": float(v.mean()) if v.size else None,
                        "std": float(v.std()) if v.size else None,
                    }
            out[s] = row
        return out

    def table(self) -> str:
        """Methods as rows, R@K then N@K columns, mean over seeds."""
        cols = [("recall", k) for k in self.ks] + [("ndcg", k) for k in self.ks]
        head = "Methods    " + "".join(f"{('R' if m == 'recall' else 'N') + '@' + str(k):>9}" for m, k in cols)
        lines = [head, "-" * len(head)]
        for s in self.strategies():
            cells = []
            for m, k in cols:
                v = self.values(s, m, k)
                cells.append(f"{v.mean():9.4f}" if v.size else f"{'failed':>9}")
            lines.append(f"{s:<11}" + "".join(cells))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {"ks": list(self.ks), "runs": self.runs, "summary": self.summary(), "timings": self.timings},
            indent=1,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "seed", "metric", "K", "value", "wallclock_s"])
        for r in self.runs:
            if r["status"] != "ok":
                continue
            for metric in ("recall", "ndcg"):
                for k in self.ks:
                    w.writerow([r["strategy"], r["seed"], metric, k, r["metrics"][metric][str(k)], r.get("seconds", "")])
        return buf.getvalue()


def compare_selectors(
    data: Dataset, strategies, seeds, cfg: ExperimentConfig = ExperimentConfig()
) -> EvalReport:
    """Select, fine-tune from the shared pretrained target and evaluate, per strategy and seed.

    The surrogate, its influence scores, the pretrained target and the effort
    scores are computed once. A failing run is recorded and the rest go on.
    """
    if not strategies or not seeds:
        raise ValueError("need at least one strategy and one seed")
    timings: dict[str, float] = {}

    def timed(name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0
        return out

    train, valid, test = data.encode("train"), data.encode("valid"), data.encode("test")
    needs_surrogate = any(s != "random" for s in strategies)
    surrogate = timed("surrogate_train", train_surrogate, data, cfg.surrogate, cfg.surrogate_train) if needs_surrogate else None
    influence = effort = None
    if "dealrec" in strategies:
        influence = timed("influence", influence_scores, surrogate, train, cfg.hvp).scores
    target = timed("target_pretrain", pretrain_target, data, cfg.target)
    if "dealrec" in strategies:
        effort = timed("effort", effort_scores, target, train).efforts

    pos = {sid: i for i, sid in enumerate(train.ids)}
    monitor = None
    if cfg.early_stopping and len(valid):
        key = min(cfg.ks)
        monitor = lambda p: rank_and_score(p, valid, (key,)).ndcg[key]  # noqa: E731

    def tune(batch, seed):
        return finetune_fewshot(target, batch, replace(cfg.finetune, seed=seed), monitor, cfg.patience)

    def run_one(strategy, seed, lam, eval_batch):
        scfg = replace(cfg.selection, strategy=strategy, seed=seed, lam=lam)
        subset = select(scfg, train, influence, effort, surrogate)
        batch = train.take([pos[s] for s in subset.selected])
        return rank_and_score(tune(batch, seed), eval_batch, cfg.ks)

    runs = []
    for strategy in strategies:
        for seed in seeds:
            t0 = time.perf_counter()
            record = {"strategy": strategy, "seed": seed}
            try:
                lam = cfg.selection.lam
                if strategy == "dealrec" and cfg.lambda_grid and len(valid):
                    key = min(cfg.ks)
                    val = {l: run_one(strategy, seed, l, valid).ndcg[key] for l in cfg.lambda_grid}
                    lam = max(cfg.lambda_grid, key=lambda l: (val[l], -l))
                    record["lambda_validation"] = {str(l): v for l, v in val.items()}
                if strategy == "dealrec":
                    record["lambda"] = lam
                metrics = run_one(strategy, seed, lam, test)
                record.update(status="ok", metrics=metrics.as_dict())
            except Exception as exc:  # a failed strategy must not sink the comparison
                logger.exception("strategy %s seed %s failed", strategy, seed)
                record.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            record["seconds"] = time.perf_counter() - t0
            timings[f"run_{strategy}"] = timings.get(f"run_{strategy}", 0.0) + record["seconds"]
            runs.append(record)

    if cfg.include_full:
        for seed in seeds:
            t0 = time.perf_counter()
            tuned = tune(train, seed)
            metrics = rank_and_score(tuned, test, cfg.ks)
            runs.append({
                "strategy": "full", "seed": seed, "status": "ok",
                "metrics": metrics.as_dict(), "seconds": time.perf_counter() - t0,
            })
        timings["run_full"] = sum(r["seconds"] for r in runs if r["strategy"] == "full")
    return EvalReport(runs, timings, tuple(sorted(cfg.ks)))
