"""Interaction logs: ingestion, temporal splitting, sequence building and a
synthetic generator with controllable temporal drift.

A training *sample* is one :class:`UserSequence` ``(history, target)``. Every
interaction that has at least ``min_history`` earlier interactions of the same
user becomes the target of one sample; its split is decided by the global time
window the target interaction falls in.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "Interaction",
    "UserSequence",
    "SplitSpec",
    "Dataset",
    "SequenceBatch",
    "DatasetError",
    "IngestError",
    "Interactions",
    "ingest_interactions",
    "build_sequences",
    "temporal_split",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
]


class DatasetError(ValueError):
    pass


class IngestError(DatasetError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.rating is not None and not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")


@dataclass(frozen=True)
class UserSequence:
    """One sample: chronological ``history`` and the next item ``target``."""

    user_id: str
    history: tuple[str, ...]
    target: str
    sample_id: str = ""

    def __post_init__(self):
        if len(self.history) < 1:
            raise ValueError("history must contain at least one item")
        if not self.sample_id:
            object.__setattr__(self, "sample_id", self.user_id)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    rating_threshold: float | None = 4.0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ValueError(f"need three non-negative ratios, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


@dataclass(frozen=True)
class SequenceBatch:
    """Integer-encoded samples.

    ``history`` is left-aligned and padded with -1; row ``i`` holds
    ``lengths[i]`` item indices, most recent last.
    """

    history: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.history.shape[1])[None, :] < self.lengths[:, None]

    def take(self, index) -> "SequenceBatch":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        lengths = self.lengths[index]
        width = max(int(lengths.max(initial=1)), 1)
        return SequenceBatch(
            history=self.history[index, :width],
            lengths=lengths,
            targets=self.targets[index],
            ids=tuple(self.ids[i] for i in index),
        )

    def repeat(self, times: int) -> "SequenceBatch":
        """Concatenate ``times`` copies (ids get a ``~k`` suffix)."""
        return SequenceBatch(
            history=np.tile(self.history, (times, 1)),
            lengths=np.tile(self.lengths, times),
            targets=np.tile(self.targets, times),
            ids=tuple(f"{i}~{k}" if k else i for k in range(times) for i in self.ids),
        )


@dataclass(frozen=True)
class Dataset:
    """Item catalog plus chronologically ordered train/valid/test samples."""

    items: tuple[str, ...]
    train: tuple[UserSequence, ...]
    valid: tuple[UserSequence, ...] = ()
    test: tuple[UserSequence, ...] = ()
    item_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "item_index", {it: i for i, it in enumerate(self.items)})
        if len(self.item_index) != len(self.items):
            raise DatasetError("duplicate item ids in catalog")
        if not self.train:
            raise DatasetError("dataset has no training samples")

    @property
    def n_items(self) -> int:
        return len(self.items)

    def encode(self, seqs: str | Sequence[UserSequence]) -> SequenceBatch:
        """Encode a split name (``"train"``...) or a list of samples."""
        if isinstance(seqs, str):
            seqs = getattr(self, seqs)
        width = max((len(s.history) for s in seqs), default=1)
        hist = np.full((len(seqs), width), -1, dtype=np.int64)
        for row, s in enumerate(seqs):
            hist[row, : len(s.history)] = [self.item_index[i] for i in s.history]
        return SequenceBatch(
            history=hist,
            lengths=np.array([len(s.history) for s in seqs], dtype=np.int64),
            targets=np.array([self.item_index.get(s.target, -1) for s in seqs], dtype=np.int64),
            ids=tuple(s.sample_id for s in seqs),
        )


class Interactions(list):
    """List of parsed interactions; ``malformed_rows`` holds 1-based line numbers."""

    def __init__(self, rows: Iterable[Interaction] = (), malformed_rows: Sequence[int] = ()):
        super().__init__(rows)
        self.malformed_rows = list(malformed_rows)


def _parse_row(fields: dict) -> Interaction:
    rating = fields.get("rating")
    if rating in (None, ""):
        rating = None
    ts = fields["timestamp"]
    if isinstance(ts, str):
        ts = ts.strip()
    ts_f = float(ts)
    if not ts_f.is_integer():
        raise ValueError("timestamp is not an integer")
    return Interaction(
        user_id=str(fields["user_id"]).strip(),
        item_id=str(fields["item_id"]).strip(),
        timestamp=int(ts_f),
        rating=None if rating is None else float(rating),
    )


def ingest_interactions(path: str | os.PathLike, format: str | None = None) -> Interactions:
    """Read ``user_id,item_id,timestamp[,rating]`` rows from CSV or JSONL.

    Malformed rows are skipped and recorded. More than 1% malformed rows (with
    at least one bad row always tolerated) raises :class:`IngestError`.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("csv", "jsonl"):
        raise IngestError(f"unsupported format {fmt!r}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    rows: list[Interaction] = []
    bad: list[int] = []
    total = 0
    if fmt == "csv":
        cols = ["user_id", "item_id", "timestamp", "rating"]
        for lineno, rec in enumerate(csv.reader(text.splitlines()), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if lineno == 1 and rec[0].strip() == "user_id":
                cols = [c.strip() for c in rec]
                continue
            total += 1
            try:
                if len(rec) not in (3, 4) or len(rec) > len(cols):
                    raise ValueError("wrong field count")
                rows.append(_parse_row(dict(zip(cols, rec))))
            except (ValueError, KeyError):
                bad.append(lineno)
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            total += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
                rows.append(_parse_row(obj))
            except (ValueError, KeyError, TypeError):
                bad.append(lineno)

    if total == 0:
        logger.warning("%s contains no interactions", path)
    if bad:
        logger.warning("%s: %d malformed rows skipped (lines %s)", path, len(bad), bad[:20])
        if len(bad) > max(1, 0.01 * total):
            raise IngestError(
                f"{len(bad)}/{total} malformed rows in {path}; lines {bad[:50]}"
            )
    return Interactions(rows, bad)


def temporal_split(interactions: Sequence | int, ratios=(0.8, 0.1, 0.1), require_valid: bool = False):
    """Contiguous train/valid/test index ranges over a time-sorted list.

    Sizes are ``floor(r0*N)``, ``floor(r1*N)`` and the remainder.
    """
    n = interactions if isinstance(interactions, int) else len(interactions)
    if n < 3:
        raise DatasetError(f"need at least 3 interactions to split, got {n}")
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_valid = math.floor(ratios[1] * n + 1e-9)
    if n_valid == 0:
        if require_valid:
            raise DatasetError(f"validation window is empty for N={n}")
        logger.warning("validation window is empty for N=%d", n)
    return range(0, n_train), range(n_train, n_train + n_valid), range(n_train + n_valid, n)


def build_sequences(
    interactions: Iterable[Interaction],
    spec: SplitSpec = SplitSpec(),
    min_history: int = 3,
    max_history: int = 20,
) -> Dataset:
    """Filter, globally time-sort, split 8:1:1 and cut per-user samples.

    Ties in timestamp are broken by ``(user_id, item_id)``. Histories hold all
    earlier interactions of the user, truncated to the ``max_history`` most
    recent. Samples in each split appear in chronological order of their
    targets, and get ids ``"{user_id}#{k}"`` with ``k`` counting that user's
    samples within the split.
    """
    thr = spec.rating_threshold
    kept = [
        it for it in interactions if thr is None or it.rating is None or it.rating >= thr
    ]
    if not kept:
        raise DatasetError("no interactions left: empty after filter")
    kept.sort(key=lambda it: (it.timestamp, it.user_id, it.item_id))
    windows = temporal_split(kept, spec.ratios)
    window_of = np.empty(len(kept), dtype=np.int8)
    for w, rng in enumerate(windows):
        window_of[rng.start : rng.stop] = w

    past: dict[str, list[str]] = defaultdict(list)
    counters = [defaultdict(int) for _ in range(3)]
    splits: list[list[UserSequence]] = [[], [], []]
    for pos, it in enumerate(kept):
        hist = past[it.user_id]
        if len(hist) >= min_history:
            w = int(window_of[pos])
            k = counters[w][it.user_id]
            counters[w][it.user_id] += 1
            splits[w].append(
                UserSequence(
                    user_id=it.user_id,
                    history=tuple(hist[-max_history:]),
                    target=it.item_id,
                    sample_id=f"{it.user_id}#{k}",
                )
            )
        hist.append(it.item_id)

    items = sorted({it.item_id for it in kept})
    return Dataset(
        items=tuple(items), train=tuple(splits[0]), valid=tuple(splits[1]), test=tuple(splits[2])
    )


def generate_synthetic(
    n_users: int,
    n_items: int,
    density: float,
    drift: float = 0.0,
    seed: int = 0,
    *,
    n_factors: int = 8,
    sharpness: float = 2.0,
    zipf_exponent: float = 1.0,
    short_term: float = 0.5,
    min_per_user: int = 2,
) -> list[Interaction]:
    """Latent-factor interaction log with Zipf popularity and rotating item factors.

    Each user gets ``max(min_per_user, Poisson(density * n_items))`` distinct
    items at times spread uniformly over the horizon. At relative time ``tau``
    every item factor pair-plane is rotated by ``drift * tau * pi / 2``, so with
    ``drift=1`` late preferences are orthogonal to early ones, and log
    popularity moves linearly from one Zipf ranking towards a second,
    independent one (weight ``drift * tau``). Items are drawn sequentially
    from ``softmax(sharpness * user.item + short_term * last.item + log
    popularity)`` without replacement.
    """
    if n_users < 2 or n_items < 2:
        raise ValueError("need at least 2 users and 2 items")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    if not 0 <= drift <= 1:
        raise ValueError("drift must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = n_factors + n_factors % 2
    user_f = rng.normal(size=(n_users, k)) / math.sqrt(k) * 2.0
    item_f = rng.normal(size=(n_items, k)) / math.sqrt(k) * 2.0
    pop_start = -zipf_exponent * np.log(rng.permutation(n_items) + 1.0)
    pop_end = -zipf_exponent * np.log(rng.permutation(n_items) + 1.0)

    counts = np.clip(rng.poisson(density * n_items, size=n_users), min_per_user, n_items)
    horizon = 2 * 365 * 86400
    t0 = 1_600_000_000
    out: list[Interaction] = []
    for u in range(n_users):
        taus = np.sort(rng.uniform(0.0, 1.0, size=counts[u]))
        avail = np.ones(n_items, dtype=bool)
        last = None
        for tau in taus:
            ang = drift * tau * math.pi / 2
            c, s = math.cos(ang), math.sin(ang)
            rot = item_f.copy()
            rot[:, 0::2] = c * item_f[:, 0::2] - s * item_f[:, 1::2]
            rot[:, 1::2] = s * item_f[:, 0::2] + c * item_f[:, 1::2]
            w = drift * tau
            logit = sharpness * rot @ user_f[u] + (1 - w) * pop_start + w * pop_end
            if last is not None:
                logit = logit + short_term * rot @ rot[last]
            logit = np.where(avail, logit, -np.inf)
            p = np.exp(logit - logit.max())
            p /= p.sum()
            item = int(rng.choice(n_items, p=p))
            avail[item] = False
            last = item
            out.append(
                Interaction(
                    user_id=f"u{u:0{len(str(n_users))}d}",
                    item_id=f"i{item:0{len(str(n_items))}d}",
                    timestamp=t0 + int(tau * horizon),
                )
            )
    return out


_SPLITS = ("train", "valid", "test")


def save_dataset(ds: Dataset, directory: str | os.PathLike) -> None:
    """Write ``catalog.tsv`` and ``{train,valid,test}.tsv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "catalog.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i, item in enumerate(ds.items):
            fh.write(f"{item}\t{i}\n")
    for name in _SPLITS:
        with open(d / f"{name}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for s in getattr(ds, name):
                hist = " ".join(str(ds.item_index[i]) for i in s.history)
                fh.write(f"{s.user_id}\t{hist}\t{ds.item_index[s.target]}\n")


def load_dataset(directory: str | os.PathLike) -> Dataset:
    d = Path(directory)
    items: list[str] = []
    with open(d / "catalog.tsv", encoding="utf-8") as fh:
        for line in fh:
            item, idx = line.rstrip("\n").split("\t")
            if int(idx) != len(items):
                raise DatasetError(f"catalog index {idx} out of order")
            items.append(item)
    splits = {}
    for name in _SPLITS:
        seqs = []
        counter: dict[str, int] = defaultdict(int)
        with open(d / f"{name}.tsv", encoding="utf-8") as fh:
            for line in fh:
                user, hist, target = line.rstrip("\n").split("\t")
                k = counter[user]
                counter[user] += 1
                seqs.append(
                    UserSequence(
                        user_id=user,
                        history=tuple(items[int(i)] for i in hist.split()),
                        target=items[int(target)],
                        sample_id=f"{user}#{k}",
                    )
                )
        splits[name] = tuple(seqs)
    return Dataset(items=tuple(items), **splits)
