"""Mean-pool cross-entropy (MPCE) surrogate recommender.

For a sample ``(x, y)``: ``u = mean(A[x])``, ``p = softmax(B @ u)`` and
``loss = -log p[y]``. ``A`` is the input item table, ``B`` the output table,
both ``n_items x d``. The flat parameter vector is ``[A.ravel(), B.ravel()]``
in full mode and ``B.ravel()`` in convex mode, where ``A`` stays at its
random initialisation and the loss is convex in ``B``.

Everything here has closed-form gradients; Hessian-vector products are exact
in convex mode and central finite differences of the gradient in full mode.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, SequenceBatch

logger = logging.getLogger(__name__)

__all__ = [
    "SurrogateConfig",
    "TrainConfig",
    "SurrogateParams",
    "SurrogateTrainingError",
    "init_surrogate",
    "train_surrogate",
    "per_sample_loss",
    "per_sample_gradient",
    "hessian_vector_product",
    "save_checkpoint",
    "load_checkpoint",
]


class SurrogateTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SurrogateConfig:
    embed_dim: int = 16
    convex_mode: bool = False
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch schedule. ``batch_size >= n`` means full-batch steps."""

    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid training schedule {self}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _convex_hvp(u: np.ndarray, p: np.ndarray, v: np.ndarray, shape) -> np.ndarray:
    # (H V)[j] = mean_s p_sj (q_sj - p_s . q_s) u_s  with  q_sj = u_s . V[j]
    q = v.reshape(shape) @ u.T
    w = p.T * (q - (p.T * q).sum(axis=0))
    return ((w @ u) / len(u)).ravel()


@dataclass
class SurrogateParams:
    A: np.ndarray
    B: np.ndarray
    convex_mode: bool = False
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return self.B.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.B.shape[1]

    @property
    def dim(self) -> int:
        """Learnable dimension ``m``."""
        return self.B.size if self.convex_mode else self.A.size + self.B.size

    @property
    def theta(self) -> np.ndarray:
        if self.convex_mode:
            return self.B.ravel().copy()
        return np.concatenate([self.A.ravel(), self.B.ravel()])

    def with_theta(self, theta: np.ndarray) -> "SurrogateParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.dim},)")
        if self.convex_mode:
            return replace(self, B=theta.reshape(self.B.shape).copy(), loss_history=[])
        k = self.A.size
        return replace(
            self,
            A=theta[:k].reshape(self.A.shape).copy(),
            B=theta[k:].reshape(self.B.shape).copy(),
            loss_history=[],
        )

    # -- forward ---------------------------------------------------------
    def pooled(self, batch: SequenceBatch) -> np.ndarray:
        mask = batch.mask
        emb = self.A[np.where(mask, batch.history, 0)] * mask[..., None]
        return emb.sum(axis=1) / batch.lengths[:, None]

    def log_probabilities(self, batch: SequenceBatch) -> np.ndarray:
        return _log_softmax(self.pooled(batch) @ self.B.T)

    def probabilities(self, batch: SequenceBatch) -> np.ndarray:
        return np.exp(self.log_probabilities(batch))

    def losses(self, batch: SequenceBatch) -> np.ndarray:
        logp = self.log_probabilities(batch)
        return -logp[np.arange(len(batch)), batch.targets]

    # -- first order -------------------------------------------------------
    def _residual(self, batch: SequenceBatch, u: np.ndarray | None = None):
        if u is None:
            u = self.pooled(batch)
        r = np.exp(_log_softmax(u @ self.B.T))
        r[np.arange(len(batch)), batch.targets] -= 1.0
        return u, r

    def gradients(self, batch: SequenceBatch) -> np.ndarray:
        """Per-sample gradients, shape ``(n, dim)``."""
        u, r = self._residual(batch)
        n = len(batch)
        gB = (r[:, :, None] * u[:, None, :]).reshape(n, -1)
        if self.convex_mode:
            return gB
        gu = (r @ self.B) / batch.lengths[:, None]
        gA = np.zeros((n,) + self.A.shape)
        rows, cols = np.nonzero(batch.mask)
        np.add.at(gA, (rows, batch.history[rows, cols]), gu[rows])
        return np.concatenate([gA.reshape(n, -1), gB], axis=1)

    def mean_gradient(self, batch: SequenceBatch, u: np.ndarray | None = None) -> np.ndarray:
        """Gradient of the mean loss without materialising per-sample rows.

        ``u`` may carry precomputed pooled inputs (valid while ``A`` is fixed).
        """
        u, r = self._residual(batch, u)
        n = len(batch)
        gB = (r.T @ u) / n
        if self.convex_mode:
            return gB.ravel()
        gu = (r @ self.B) / batch.lengths[:, None] / n
        gA = np.zeros_like(self.A)
        rows, cols = np.nonzero(batch.mask)
        np.add.at(gA, batch.history[rows, cols], gu[rows])
        return np.concatenate([gA.ravel(), gB.ravel()])

    # -- second order ------------------------------------------------------
    def hvp(self, batch: SequenceBatch, v: np.ndarray, step: float = 1e-4) -> np.ndarray:
        """Hessian of the batch-mean loss times ``v``."""
        v = np.asarray(v, dtype=np.float64)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return np.zeros_like(v)
        if self.convex_mode:
            u = self.pooled(batch)
            return _convex_hvp(u, np.exp(_log_softmax(u @ self.B.T)), v, self.B.shape)
        direction = v / norm
        theta = self.theta
        g_plus = self.with_theta(theta + step * direction).mean_gradient(batch)
        g_minus = self.with_theta(theta - step * direction).mean_gradient(batch)
        return (g_plus - g_minus) / (2 * step) * norm

    def curvature(self, batch: SequenceBatch):
        """``hvp(idx, v)`` restricted to rows ``idx`` of ``batch``.

        In convex mode the pooled inputs and probabilities do not depend on
        ``v`` and are computed once here.
        """
        if not self.convex_mode:
            return lambda idx, v: self.hvp(batch.take(idx), v)
        u = self.pooled(batch)
        p = np.exp(_log_softmax(u @ self.B.T))
        return lambda idx, v: _convex_hvp(u[idx], p[idx], v, self.B.shape)

    def hessian(self, batch: SequenceBatch) -> np.ndarray:
        """Explicit mean Hessian; analytic in convex mode, HVP columns otherwise."""
        m = self.dim
        if self.convex_mode:
            u = self.pooled(batch)
            p = self.probabilities(batch)
            H = np.zeros((m, m))
            for pi, ui in zip(p, u):
                H += np.kron(np.diag(pi) - np.outer(pi, pi), np.outer(ui, ui))
            return H / len(batch)
        eye = np.eye(m)
        H = np.stack([self.hvp(batch, eye[j]) for j in range(m)], axis=1)
        return 0.5 * (H + H.T)


def per_sample_loss(params: SurrogateParams, batch: SequenceBatch) -> np.ndarray:
    return params.losses(batch)


def per_sample_gradient(params: SurrogateParams, batch: SequenceBatch) -> np.ndarray:
    return params.gradients(batch)


def hessian_vector_product(params: SurrogateParams, batch: SequenceBatch, v, step: float = 1e-4):
    return params.hvp(batch, v, step=step)


def init_surrogate(n_items: int, cfg: SurrogateConfig) -> SurrogateParams:
    rng = np.random.default_rng(cfg.seed)
    A = rng.normal(scale=cfg.init_scale, size=(n_items, cfg.embed_dim))
    B = rng.normal(scale=0.1 * cfg.init_scale, size=(n_items, cfg.embed_dim))
    return SurrogateParams(A=A, B=B, convex_mode=cfg.convex_mode)


def train_surrogate(
    data: Dataset | SequenceBatch,
    cfg: SurrogateConfig,
    tcfg: TrainConfig,
    n_items: int | None = None,
    init: SurrogateParams | None = None,
) -> SurrogateParams:
    """Plain mini-batch gradient descent with L2 weight decay.

    ``loss_history`` holds the mean training loss before training and after
    every epoch. Batch order is a seeded permutation per epoch.
    """
    if isinstance(data, Dataset):
        batch = data.encode("train")
        n_items = data.n_items
    else:
        batch = data
        if n_items is None:
            raise ValueError("n_items is required when training on a SequenceBatch")
    n = len(batch)
    if n == 0:
        raise SurrogateTrainingError("empty training set")
    params = init if init is not None else init_surrogate(n_items, cfg)
    params = SurrogateParams(params.A.copy(), params.B.copy(), params.convex_mode)
    rng = np.random.default_rng(tcfg.seed)
    lr, wd = tcfg.learning_rate, tcfg.weight_decay
    bs = min(tcfg.batch_size, n)
    full_batch = bs == n

    # A never moves in convex mode, so pooled inputs are computed once
    fixed_u = params.pooled(batch) if params.convex_mode else None

    def mean_loss() -> float:
        u = params.pooled(batch) if fixed_u is None else fixed_u
        return float(-_log_softmax(u @ params.B.T)[np.arange(n), batch.targets].mean())

    history = [mean_loss()]
    step = 0
    for _ in range(tcfg.epochs):
        order = np.arange(n) if full_batch else rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start : start + bs]
            mb = batch if full_batch else batch.take(rows)
            g = params.mean_gradient(mb, None if fixed_u is None else fixed_u[rows])
            if not np.all(np.isfinite(g)):
                raise SurrogateTrainingError(f"non-finite gradient at step {step}")
            kB = params.B.size
            params.B -= lr * (g[-kB:].reshape(params.B.shape) + wd * params.B)
            if not params.convex_mode:
                params.A -= lr * (g[:-kB].reshape(params.A.shape) + wd * params.A)
            step += 1
        loss = mean_loss()
        if not np.isfinite(loss):
            raise SurrogateTrainingError(f"non-finite loss at step {step}")
        history.append(loss)
    params.loss_history = history
    logger.debug("surrogate trained: loss %.4f -> %.4f in %d steps", history[0], history[-1], step)
    return params


_HEADER = struct.Struct("<4q")


def save_checkpoint(params: SurrogateParams, path) -> None:
    """Header ``(m, d, n_items, convex)`` as int64 LE, then ``[A, B]`` as float64 LE."""
    body = np.concatenate([params.A.ravel(), params.B.ravel()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(params.dim, params.embed_dim, params.n_items, int(params.convex_mode)))
        fh.write(body.tobytes())


def load_checkpoint(path) -> SurrogateParams:
    raw = Path(path).read_bytes()
    m, d, n_items, convex = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    if body.size != 2 * n_items * d:
        raise ValueError(f"checkpoint {path} is truncated")
    k = n_items * d
    params = SurrogateParams(
        A=body[:k].reshape(n_items, d).copy(),
        B=body[k:].reshape(n_items, d).copy(),
        convex_mode=bool(convex),
    )
    if params.dim != m:
        raise ValueError(f"checkpoint {path}: header dimension {m} != {params.dim}")
    return params
