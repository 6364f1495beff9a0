"""The target recommender that gets fine-tuned few-shot.

Two small autoregressive next-item models stand in for a large model:

* ``mpce-large``: mean-pooled item embeddings followed by ``n_layers``
  residual tanh blocks and a full-catalog output projection.
* ``tiny-transformer``: causal self-attention over the right-aligned history;
  the last position predicts the next item.

With ``learnable_subset="adapters-only"`` a rank-``adapter_rank`` additive
factor on the output projection is the only trainable part after
pretraining (the up factor starts at zero, as in LoRA). Everything runs in
float64 so gradients can be checked by finite differences.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad, vmap

from .dataset import Dataset, SequenceBatch
from .surrogate import TrainConfig

__all__ = [
    "TargetConfig",
    "TargetParams",
    "EffortResult",
    "TargetTrainingError",
    "build_target",
    "pretrain_target",
    "effort_scores",
    "read_effort",
    "finetune_fewshot",
    "save_target",
    "load_target",
]

ARCHITECTURES = ("mpce-large", "tiny-transformer")
SUBSETS = ("all", "adapters-only")
_ADAPTER = ("adapter_up", "adapter_down")


class TargetTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetConfig:
    architecture: str = "mpce-large"
    embed_dim: int = 32
    n_layers: int = 1
    n_heads: int = 2
    learnable_subset: str = "all"
    adapter_rank: int = 4
    max_history: int = 20
    pretrain_fraction: float = 0.5
    pretrain: TrainConfig = TrainConfig(epochs=20, batch_size=64, learning_rate=0.005, weight_decay=0.0)
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.learnable_subset not in SUBSETS:
            raise ValueError(f"unknown learnable subset {self.learnable_subset!r}")
        if not 0.0 < self.pretrain_fraction < 1.0:
            raise ValueError("pretrain_fraction must lie strictly inside (0, 1)")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")


class _Recommender(nn.Module):
    def __init__(self, n_items: int, d: int, adapter_rank: int):
        super().__init__()
        self.n_items = n_items
        self.item_embedding = nn.Embedding(n_items + 1, d, padding_idx=n_items)
        self.output = nn.Linear(d, n_items)
        if adapter_rank:
            self.adapter_up = nn.Parameter(torch.zeros(n_items, adapter_rank))
            self.adapter_down = nn.Parameter(torch.randn(adapter_rank, d) / math.sqrt(d))
        else:
            self.adapter_up = self.adapter_down = None

    def project(self, h: torch.Tensor) -> torch.Tensor:
        logits = self.output(h)
        if self.adapter_up is not None:
            logits = logits + (h @ self.adapter_down.T) @ self.adapter_up.T
        return logits


class MeanPoolRecommender(_Recommender):
    def __init__(self, n_items: int, d: int, n_layers: int = 1, adapter_rank: int = 0):
        super().__init__(n_items, d, adapter_rank)
        self.blocks = nn.ModuleList(nn.Linear(d, d) for _ in range(n_layers))

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.to(torch.float64).unsqueeze(-1)
        h = (self.item_embedding(tokens) * m).sum(-2) / m.sum(-2)
        for block in self.blocks:
            h = h + torch.tanh(block(h))
        return self.project(h)


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.mlp_in = nn.Linear(d, 2 * d)
        self.mlp_out = nn.Linear(2 * d, d)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, L, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.norm1(x)).split(d, dim=-1)
        q, k, v = (t.reshape(b, L, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(~allowed.unsqueeze(1), float("-inf")).softmax(-1)
        x = x + self.proj((att @ v).transpose(1, 2).reshape(b, L, d))
        return x + self.mlp_out(F.gelu(self.mlp_in(self.norm2(x))))


class TinyTransformer(_Recommender):
    def __init__(self, n_items: int, d: int, n_layers: int, n_heads: int, max_len: int, adapter_rank: int = 0):
        super().__init__(n_items, d, adapter_rank)
        self.position = nn.Parameter(torch.randn(max_len, d) * 0.02)
        self.blocks = nn.ModuleList(_Block(d, n_heads) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        L = tokens.shape[-1]
        x = self.item_embedding(tokens) + self.position[-L:]
        causal = torch.ones(L, L, dtype=torch.bool).tril()
        # padded keys are hidden; every query still sees itself
        allowed = causal & (mask.unsqueeze(-2) | torch.eye(L, dtype=torch.bool))
        for block in self.blocks:
            x = block(x, allowed)
        return self.project(self.norm(x[:, -1]))


def build_target(n_items: int, cfg: TargetConfig) -> nn.Module:
    rank = cfg.adapter_rank if cfg.learnable_subset == "adapters-only" else 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.architecture == "mpce-large":
            module = MeanPoolRecommender(n_items, cfg.embed_dim, cfg.n_layers, rank)
        else:
            module = TinyTransformer(n_items, cfg.embed_dim, cfg.n_layers, cfg.n_heads, cfg.max_history, rank)
    return module.double()


def _tokens(batch: SequenceBatch, n_items: int, max_len: int):
    """Right-aligned token matrix padded with ``n_items`` plus validity mask."""
    lengths = np.minimum(batch.lengths, max_len)
    tok = np.full((len(batch), max_len), n_items, dtype=np.int64)
    for row, (h, n, full) in enumerate(zip(batch.history, lengths, batch.lengths)):
        tok[row, max_len - n :] = h[full - n : full]
    tok_t = torch.from_numpy(tok)
    return tok_t, tok_t != n_items


@dataclass
class TargetParams:
    config: TargetConfig
    n_items: int
    module: nn.Module
    loss_history: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def learnable_names(self) -> list[str]:
        names = [k for k, _ in self.module.named_parameters()]
        if self.config.learnable_subset == "adapters-only":
            return [k for k in names if k in _ADAPTER]
        return names

    @property
    def base_names(self) -> list[str]:
        return [k for k, _ in self.module.named_parameters() if k not in _ADAPTER]

    @property
    def learnable_mask(self) -> dict[str, bool]:
        learn = set(self.learnable_names)
        return {k: k in learn for k, _ in self.module.named_parameters()}

    @property
    def phi(self) -> np.ndarray:
        params = dict(self.module.named_parameters())
        return np.concatenate([params[k].detach().numpy().ravel() for k in self.learnable_names])

    def with_phi(self, phi: np.ndarray) -> "TargetParams":
        """Copy with the learnable subset replaced by the flat vector ``phi``."""
        out = TargetParams(self.config, self.n_items, copy.deepcopy(self.module))
        params = dict(out.module.named_parameters())
        phi = np.asarray(phi, dtype=np.float64)
        pos = 0
        with torch.no_grad():
            for k in out.learnable_names:
                v = params[k]
                v.copy_(torch.from_numpy(phi[pos : pos + v.numel()].reshape(v.shape).copy()))
                pos += v.numel()
        if pos != phi.size:
            raise ValueError(f"phi has {phi.size} values, learnable subset needs {pos}")
        return out

    @property
    def frozen(self) -> dict[str, np.ndarray]:
        learn = set(self.learnable_names)
        return {k: v.detach().numpy().copy() for k, v in self.module.named_parameters() if k not in learn}

    def encode(self, batch: SequenceBatch):
        return _tokens(batch, self.n_items, self.config.max_history)

    @torch.no_grad()
    def logits(self, batch: SequenceBatch, chunk: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(batch), chunk):
            tok, mask = self.encode(batch.take(np.arange(start, min(start + chunk, len(batch)))))
            out.append(self.module(tok, mask).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.n_items))

    def losses(self, batch: SequenceBatch) -> np.ndarray:
        logp = self.logits(batch)
        logp = logp - logp.max(1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(1, keepdims=True))
        return -logp[np.arange(len(batch)), batch.targets]

    def gradients(self, batch: SequenceBatch, names: list[str] | None = None, chunk: int = 256):
        """Per-sample gradients over ``names`` (default: learnable subset), ``(n, m)``."""
        return np.concatenate(list(_grad_chunks(self, batch, names or self.learnable_names, chunk)))


def _grad_chunks(params: TargetParams, batch: SequenceBatch, names: list[str], chunk: int):
    module = params.module
    named = dict(module.named_parameters())
    rest = {k: v.detach() for k, v in named.items() if k not in names}

    def loss_one(p, tok, msk, y):
        logits = functional_call(module, {**rest, **p}, (tok.unsqueeze(0), msk.unsqueeze(0)))
        return F.cross_entropy(logits, y.unsqueeze(0))

    per_sample = vmap(grad(loss_one), in_dims=(None, 0, 0, 0))
    p = {k: named[k].detach() for k in names}
    for start in range(0, len(batch), chunk):
        sub = batch.take(np.arange(start, min(start + chunk, len(batch))))
        tok, mask = params.encode(sub)
        g = per_sample(p, tok, mask, torch.from_numpy(sub.targets))
        yield torch.cat([g[k].reshape(len(sub), -1) for k in names], dim=1).numpy()


@dataclass
class EffortResult:
    efforts: dict[str, float]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"sample_id": sid, "user_id": sid.split("#")[0], "effort": float(v)}) + "\n"
            for sid, v in self.efforts.items()
        )


def read_effort(path) -> dict[str, float]:
    with open(path, encoding="utf-8") as fh:
        return {rec["sample_id"]: rec["effort"] for rec in map(json.loads, fh) if rec}


def effort_scores(params: TargetParams, samples: SequenceBatch, chunk: int = 256) -> EffortResult:
    """L2 norm of each sample's loss gradient w.r.t. the learnable subset."""
    norms = [
        np.linalg.norm(g, axis=1)
        for g in _grad_chunks(params, samples, params.learnable_names, chunk)
    ]
    values = np.concatenate(norms) if norms else np.zeros(0)
    return EffortResult(dict(zip(samples.ids, values.tolist())))


def _fit(params: TargetParams, batch: SequenceBatch, names: list[str], tcfg: TrainConfig, on_epoch=None) -> list[float]:
    module = params.module
    named = dict(module.named_parameters())
    for k, v in named.items():
        v.requires_grad_(k in names)
    opt = torch.optim.Adam([named[k] for k in names], lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    tok_all, mask_all = params.encode(batch)
    y_all = torch.from_numpy(batch.targets)
    n = len(batch)
    history = []
    step = 0
    for _ in range(tcfg.epochs):
        order = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            loss = F.cross_entropy(module(tok_all[idx], mask_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TargetTrainingError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        history.append(total / n)
        if on_epoch is not None and on_epoch(len(history)):
            break
    for v in named.values():
        v.requires_grad_(True)
    return history


def pretrain_target(data: Dataset | SequenceBatch, cfg: TargetConfig, n_items: int | None = None) -> TargetParams:
    """Train the base model on the earliest ``pretrain_fraction`` of the training window."""
    if isinstance(data, Dataset):
        train, n_items = data.encode("train"), data.n_items
    else:
        train = data
        if n_items is None:
            raise ValueError("n_items is required when pretraining on a SequenceBatch")
    if len(train) == 0:
        raise TargetTrainingError("empty training set")
    cut = max(1, math.floor(cfg.pretrain_fraction * len(train)))
    params = TargetParams(cfg, n_items, build_target(n_items, cfg))
    params.loss_history = _fit(params, train.take(np.arange(cut)), params.base_names, cfg.pretrain)
    return params


def finetune_fewshot(
    params: TargetParams,
    subset: SequenceBatch,
    tcfg: TrainConfig,
    monitor: Callable[[TargetParams], float] | None = None,
    patience: int = 3,
) -> TargetParams:
    """Fine-tune a copy of ``params`` on ``subset``; only the learnable subset moves.

    With ``monitor`` (higher is better, e.g. validation NDCG) the weights of
    the best epoch are kept and training stops after ``patience`` epochs
    without improvement.
    """
    if len(subset) == 0:
        raise ValueError("cannot fine-tune on an empty subset")
    tuned = TargetParams(params.config, params.n_items, copy.deepcopy(params.module))
    if monitor is None:
        tuned.loss_history = _fit(tuned, subset, tuned.learnable_names, tcfg)
        return tuned

    best = {"value": -math.inf, "epoch": 0, "state": None}

    def on_epoch(epoch: int) -> bool:
        value = monitor(tuned)
        if value > best["value"]:
            best.update(value=value, epoch=epoch, state=copy.deepcopy(tuned.module.state_dict()))
        return epoch - best["epoch"] >= patience

    tuned.loss_history = _fit(tuned, subset, tuned.learnable_names, tcfg, on_epoch)
    tuned.module.load_state_dict(best["state"])
    tuned.best_epoch = best["epoch"]
    return tuned


_HEADER = struct.Struct("<4q")


def save_target(params: TargetParams, path) -> None:
    """Header ``(m, d, n_items, arch)`` int64 LE, float64 LE values, then a uint8 learnable mask."""
    mask = params.learnable_mask
    values, bits = [], []
    for k, v in params.module.named_parameters():
        arr = v.detach().numpy().ravel()
        values.append(arr)
        bits.append(np.full(arr.size, mask[k], dtype=np.uint8))
    flat = np.concatenate(values).astype("<f8")
    arch = ARCHITECTURES.index(params.config.architecture)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(flat.size, params.config.embed_dim, params.n_items, arch))
        fh.write(flat.tobytes())
        fh.write(np.concatenate(bits).tobytes())


def load_target(path, cfg: TargetConfig) -> TargetParams:
    raw = Path(path).read_bytes()
    m, d, n_items, arch = _HEADER.unpack_from(raw)
    if ARCHITECTURES[arch] != cfg.architecture or d != cfg.embed_dim:
        raise ValueError(f"checkpoint {path} does not match config {cfg}")
    flat = np.frombuffer(raw, dtype="<f8", count=m, offset=_HEADER.size)
    params = TargetParams(cfg, n_items, build_target(n_items, cfg))
    pos = 0
    with torch.no_grad():
        for _, v in params.module.named_parameters():
            v.copy_(torch.from_numpy(flat[pos : pos + v.numel()].reshape(v.shape).copy()))
            pos += v.numel()
    if pos != m:
        raise ValueError(f"checkpoint {path} has {m} values, model needs {pos}")
    return params
