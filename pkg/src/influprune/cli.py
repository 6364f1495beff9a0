"""Staged pipeline driver.

Every command reads a JSON config, checks that the artifacts it depends on
exist in the work directory, writes its own outputs there and records them in
``manifest.json`` with content hashes. Exit codes: 0 ok, 1 runtime or config
error, 2 missing prerequisite, 3 config changed since a prerequisite ran.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .dataset import SplitSpec, build_sequences, generate_synthetic, ingest_interactions, load_dataset, save_dataset
from .evaluation import EvalReport, ExperimentConfig, compare_selectors, rank_and_score
from .influence import HvpConfig, influence_scores, read_influence, write_influence
from .selection import SelectionConfig, Subset, select
from .surrogate import SurrogateConfig, TrainConfig, load_checkpoint, save_checkpoint, train_surrogate
from .target import (
    TargetConfig,
    effort_scores,
    finetune_fewshot,
    load_target,
    pretrain_target,
    read_effort,
    save_target,
)

logger = logging.getLogger("influprune")

MANIFEST = "manifest.json"
DATASET_FILES = tuple(f"dataset/{n}.tsv" for n in ("catalog", "train", "valid", "test"))


class StageError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- config

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "path": None,
        "format": None,
        "synthetic": None,
        "split": {"ratios": [0.8, 0.1, 0.1], "rating_threshold": 4.0},
        "min_history": 3,
        "max_history": 20,
    },
    "surrogate": {"model": {}, "train": {}},
    "influence": {},
    "target": {"model": {}, "finetune": {}, "early_stopping": True, "patience": 3},
    "selection": {},
    "evaluation": {
        "ks": [10, 20],
        "compare": False,
        "strategies": ["dealrec", "random", "grand", "el2n", "ccs"],
        "seeds": [0, 1, 2, 3, 4],
        "lambda_grid": [],
        "include_full": False,
    },
    "validate": {"seeds": [0], "n_probes": 30},
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ValueError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _build(cls, fields: dict, seed: int, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(fields) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    kw = dict(fields)
    if "seed" in names:
        kw.setdefault("seed", seed)
    return cls(**kw)


@dataclass(frozen=True)
class PipelineConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path, seed: int | None = None) -> "PipelineConfig":
        path = Path(path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from exc
        raw = _merge(DEFAULTS, user)
        if seed is not None:
            raw["seed"] = seed
        ds = raw["dataset"]
        if (ds["path"] is None) == (ds["synthetic"] is None):
            raise ValueError("dataset needs exactly one of 'path' or 'synthetic'")
        cfg = cls(raw, path.resolve().parent)
        if ds["path"] is not None and not cfg.dataset_path.exists():
            raise ValueError(f"dataset path {cfg.dataset_path} does not exist")
        cfg.sections()  # validate every section up front
        return cfg

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def dataset_path(self) -> Path:
        return (self.base_dir / self.raw["dataset"]["path"]).resolve()

    @property
    def hash(self) -> str:
        # the resolved dataset path is hashed, not how it was written
        body = copy.deepcopy(self.raw)
        if body["dataset"]["path"] is not None:
            body["dataset"]["path"] = str(self.dataset_path)
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def sections(self) -> dict:
        r, s = self.raw, self.seed
        tm = dict(r["target"]["model"])
        pre = _build(TrainConfig, tm.pop("pretrain", {}), s, "target.model.pretrain")
        return {
            "split": SplitSpec(tuple(r["dataset"]["split"]["ratios"]), r["dataset"]["split"]["rating_threshold"]),
            "surrogate": _build(SurrogateConfig, r["surrogate"]["model"], s, "surrogate.model"),
            "surrogate_train": _build(TrainConfig, r["surrogate"]["train"], s, "surrogate.train"),
            "hvp": _build(HvpConfig, r["influence"], s, "influence"),
            "target": _build(TargetConfig, {**tm, "pretrain": pre}, s, "target.model"),
            "finetune": _build(
                TrainConfig,
                {"epochs": 20, "batch_size": 16, "learning_rate": 1e-3, "weight_decay": 0.0, **r["target"]["finetune"]},
                s,
                "target.finetune",
            ),
            "selection": _build(SelectionConfig, r["selection"], s, "selection"),
        }


# ---------------------------------------------------------------- stages


class Workdir:
    def __init__(self, root: Path, cfg: PipelineConfig, force: bool):
        self.root, self.cfg, self.force = root, cfg, force
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = root / MANIFEST
        self.manifest = json.loads(mpath.read_text()) if mpath.exists() else {"stages": {}}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, files: dict[str, str]) -> dict[str, str]:
        """``files`` maps a relative path to the stage producing it; returns input hashes."""
        hashes = {}
        for rel, stage in files.items():
            p = self.path(rel)
            if not p.exists():
                raise StageError(f"missing {rel}: run '{stage}' first", 2)
            recorded = self.manifest["stages"].get(stage, {}).get("config_hash")
            if recorded is not None and recorded != self.cfg.hash and not self.force:
                raise StageError(f"config changed since '{stage}' ran (use --force to override)", 3)
            hashes[rel] = _sha256(p)
        return hashes

    def record(self, stage: str, inputs: dict, outputs: list[str], seconds: float) -> None:
        self.manifest["stages"][stage] = {
            "config_hash": self.cfg.hash,
            "inputs": inputs,
            "outputs": {rel: _sha256(self.path(rel)) for rel in outputs},
            "seconds": round(seconds, 3),
        }
        text = json.dumps(self.manifest, indent=1, sort_keys=True)
        (self.root / MANIFEST).write_text(text + "\n", encoding="utf-8")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def stage_ingest(w: Workdir, sec: dict) -> tuple[dict, list[str]]:
    ds_cfg = w.cfg.raw["dataset"]
    inputs = {}
    if ds_cfg["path"] is not None:
        log = ingest_interactions(w.cfg.dataset_path, ds_cfg["format"])
        inputs[str(w.cfg.dataset_path)] = _sha256(w.cfg.dataset_path)
        if log.malformed_rows:
            logger.warning("skipped %d malformed rows", len(log.malformed_rows))
    else:
        syn = dict(ds_cfg["synthetic"])
        syn.setdefault("seed", w.cfg.seed)
        log = generate_synthetic(**syn)
    data = build_sequences(log, sec["split"], ds_cfg["min_history"], ds_cfg["max_history"])
    save_dataset(data, w.path("dataset"))
    return inputs, list(DATASET_FILES)


def _need_dataset(w: Workdir):
    inputs = w.require({rel: "ingest" for rel in DATASET_FILES})
    return load_dataset(w.path("dataset")), inputs


def stage_train_surrogate(w: Workdir, sec: dict):
    data, inputs = _need_dataset(w)
    params = train_surrogate(data, sec["surrogate"], sec["surrogate_train"])
    save_checkpoint(params, w.path("surrogate.ckpt"))
    return inputs, ["surrogate.ckpt"]


def stage_score_influence(w: Workdir, sec: dict):
    data, inputs = _need_dataset(w)
    inputs |= w.require({"surrogate.ckpt": "train-surrogate"})
    model = load_checkpoint(w.path("surrogate.ckpt"))
    result = influence_scores(model, data.encode("train"), sec["hvp"])
    write_influence(result, w.path("influence.jsonl"), w.path("influence_diagnostics.json"))
    return inputs, ["influence.jsonl", "influence_diagnostics.json"]


def stage_score_effort(w: Workdir, sec: dict):
    data, inputs = _need_dataset(w)
    target = pretrain_target(data, sec["target"])
    save_target(target, w.path("target_pretrained.ckpt"))
    _write(w.path("effort.jsonl"), effort_scores(target, data.encode("train")).to_jsonl())
    return inputs, ["target_pretrained.ckpt", "effort.jsonl"]


def stage_select(w: Workdir, sec: dict):
    scfg = sec["selection"]
    data, inputs = _need_dataset(w)
    train = data.encode("train")
    influence = effort = surrogate = None
    if scfg.strategy == "dealrec":
        inputs |= w.require({"influence.jsonl": "score-influence", "effort.jsonl": "score-effort"})
        influence = read_influence(w.path("influence.jsonl"))
        effort = read_effort(w.path("effort.jsonl"))
    elif scfg.strategy != "random":
        inputs |= w.require({"surrogate.ckpt": "train-surrogate"})
        surrogate = load_checkpoint(w.path("surrogate.ckpt"))
    subset = select(scfg, train, influence, effort, surrogate)
    _write(w.path("subset.json"), subset.to_json() + "\n")
    return inputs, ["subset.json"]


def _monitor(data, cfg: PipelineConfig):
    valid = data.encode("valid")
    if not cfg.raw["target"]["early_stopping"] or len(valid) == 0:
        return None
    k = min(cfg.raw["evaluation"]["ks"])
    return lambda p: rank_and_score(p, valid, (k,)).ndcg[k]


def stage_finetune(w: Workdir, sec: dict):
    data, inputs = _need_dataset(w)
    inputs |= w.require({"subset.json": "select", "target_pretrained.ckpt": "score-effort"})
    subset = Subset.from_json(w.path("subset.json").read_text(encoding="utf-8"))
    train = data.encode("train")
    pos = {sid: i for i, sid in enumerate(train.ids)}
    missing = [s for s in subset.selected if s not in pos]
    if missing:
        raise StageError(f"subset.json names unknown samples, e.g. {missing[0]}", 1)
    target = load_target(w.path("target_pretrained.ckpt"), sec["target"])
    tuned = finetune_fewshot(
        target,
        train.take([pos[s] for s in subset.selected]),
        sec["finetune"],
        _monitor(data, w.cfg),
        w.cfg.raw["target"]["patience"],
    )
    save_target(tuned, w.path("target_finetuned.ckpt"))
    return inputs, ["target_finetuned.ckpt"]


def _strip_timings(report: EvalReport) -> EvalReport:
    runs = [{k: v for k, v in r.items() if k != "seconds"} for r in report.runs]
    return EvalReport(runs, {}, report.ks)


def stage_evaluate(w: Workdir, sec: dict):
    data, inputs = _need_dataset(w)
    inputs |= w.require({"target_pretrained.ckpt": "score-effort", "target_finetuned.ckpt": "finetune"})
    ev = w.cfg.raw["evaluation"]
    ks = tuple(sorted(ev["ks"]))
    test = data.encode("test")
    runs = []
    for name, ckpt in (("pretrained", "target_pretrained.ckpt"), (sec["selection"].strategy, "target_finetuned.ckpt")):
        metrics = rank_and_score(load_target(w.path(ckpt), sec["target"]), test, ks)
        runs.append({"strategy": name, "seed": w.cfg.seed, "status": "ok", "metrics": metrics.as_dict()})
    outputs = ["report.json", "report.csv", "report.txt"]
    report = EvalReport(runs, {}, ks)
    if ev["compare"]:
        exp = ExperimentConfig(
            surrogate=sec["surrogate"],
            surrogate_train=sec["surrogate_train"],
            hvp=sec["hvp"],
            target=sec["target"],
            finetune=sec["finetune"],
            selection=sec["selection"],
            ks=ks,
            lambda_grid=tuple(ev["lambda_grid"]),
            include_full=ev["include_full"],
            early_stopping=w.cfg.raw["target"]["early_stopping"],
            patience=w.cfg.raw["target"]["patience"],
        )
        comparison = _strip_timings(compare_selectors(data, ev["strategies"], ev["seeds"], exp))
        _write(w.path("comparison.json"), comparison.to_json() + "\n")
        _write(w.path("comparison.txt"), comparison.table() + "\n")
        outputs += ["comparison.json", "comparison.txt"]
    # wall-clock lives in the manifest so reports stay byte-stable
    _write(w.path("report.json"), report.to_json() + "\n")
    _write(w.path("report.csv"), report.to_csv())
    _write(w.path("report.txt"), report.table() + "\n")
    print(report.table())
    return inputs, outputs


def stage_validate(w: Workdir, sec: dict):
    from .toy import validate

    vcfg = w.cfg.raw["validate"]
    results = [validate(seed=s, n_probes=vcfg["n_probes"]) for s in vcfg["seeds"]]
    for r in results:
        print(
            f"seed {r['seed']}: spearman(score, loo) = {r['spearman_influence_vs_loo']:.4f}  "
            f"ihvp relative error = {r['ihvp_relative_error']:.4f}"
        )
    _write(w.path("validation.json"), json.dumps(results, indent=1, sort_keys=True) + "\n")
    return {}, ["validation.json"]


STAGES = {
    "ingest": stage_ingest,
    "train-surrogate": stage_train_surrogate,
    "score-influence": stage_score_influence,
    "score-effort": stage_score_effort,
    "select": stage_select,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
    "validate": stage_validate,
}
PIPELINE = ("ingest", "train-surrogate", "score-influence", "score-effort", "select", "finetune", "evaluate")


@contextlib.contextmanager
def _thread_cap():
    value = os.environ.get("INFLUPRUNE_THREADS")
    if not value:
        yield
        return
    import torch
    from threadpoolctl import threadpool_limits

    n = max(1, int(value))
    before = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        with threadpool_limits(limits=n):
            yield
    finally:
        torch.set_num_threads(before)


def run(command: str, config_path, workdir="work", seed: int | None = None, force: bool = False) -> int:
    """Run one command (or ``all``); returns the process exit status."""
    if command != "all" and command not in STAGES:
        print(f"error: unknown command {command!r}", file=sys.stderr)
        return 1
    try:
        cfg = PipelineConfig.load(config_path, seed)
        sec = cfg.sections()
    except (ValueError, TypeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 1
    w = Workdir(Path(workdir), cfg, force)
    todo = PIPELINE if command == "all" else (command,)
    with _thread_cap():
        for name in todo:
            t0 = time.perf_counter()
            try:
                inputs, outputs = STAGES[name](w, sec)
            except StageError as exc:
                print(f"error: {name}: {exc}", file=sys.stderr)
                return exc.code
            except Exception as exc:  # one-line reason, full trace in the log
                logger.debug("stage %s failed", name, exc_info=True)
                print(f"error: {name}: {type(exc).__name__}: {exc}", file=sys.stderr)
                return 1
            w.record(name, inputs, outputs, time.perf_counter() - t0)
            logger.info("%s done in %.1fs", name, time.perf_counter() - t0)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="influprune", description="Influence- and effort-based data pruning pipeline.")
    parser.add_argument("command", choices=[*STAGES, "all"])
    parser.add_argument("--config", required=True, help="JSON pipeline config")
    parser.add_argument("--workdir", default="work")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config's top-level seed")
    parser.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args.command, args.config, args.workdir, args.seed, args.force)


if __name__ == "__main__":
    sys.exit(main())
