"""Vector-quantisation bottleneck.

Encoder outputs are snapped to their nearest codebook row (Euclidean
distance, ties to the smallest index).  The codebook is maintained either by
exponential moving averages of assigned encodings (default) or by gradient
descent on the codebook term of the VQ loss.  It is initialised by k-means on
the first batch of encodings and entries whose EMA cluster size drops under a
threshold are re-seeded from the current batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, StateError

logger = logging.getLogger(__name__)

EMA_EPS = 1e-5


@dataclass
class Codebook:
    num_codes: int
    dim: int
    decay: float = 0.99
    commitment_cost: float = 0.25
    replace_threshold: float = 2.0
    use_ema: bool = True
    vectors: Tensor = field(init=False)
    ema_cluster_size: np.ndarray = field(init=False)
    ema_sum: np.ndarray = field(init=False)
    initialized: bool = field(default=False, init=False)
    warnings: list[str] = field(default_factory=list, init=False)

    def __post_init__(self):
        if self.num_codes < 1 or self.dim < 1:
            raise ContractError(f"codebook needs J >= 1 and E >= 1, got J={self.num_codes} E={self.dim}")
        if not 0.0 <= self.decay < 1.0:
            raise ContractError(f"EMA decay must lie in [0, 1), got {self.decay}")
        if self.commitment_cost < 0 or self.replace_threshold < 0:
            raise ContractError("commitment cost and replacement threshold must be non-negative")
        self.vectors = Tensor(np.zeros((self.num_codes, self.dim)), requires_grad=not self.use_ema)
        self.ema_cluster_size = np.zeros(self.num_codes)
        self.ema_sum = np.zeros((self.num_codes, self.dim))

    def set_vectors(self, vectors: np.ndarray, counts: np.ndarray | None = None) -> None:
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.shape != (self.num_codes, self.dim):
            raise ContractError(f"codebook vectors must be {(self.num_codes, self.dim)}, got {vectors.shape}")
        counts = np.ones(self.num_codes) if counts is None else np.asarray(counts, dtype=np.float64)
        self.vectors.data = vectors
        self.ema_cluster_size = counts.copy()
        self.ema_sum = vectors * counts[:, None]
        self.initialized = True

    def parameters(self) -> list[Tensor]:
        return [] if self.use_ema else [self.vectors]


@dataclass
class QuantizeResult:
    index: np.ndarray
    quantized: np.ndarray
    st_output: Tensor
    h_enc: Tensor
    z: Tensor

    @property
    def vq_loss_codebook(self) -> Tensor:
        """``||sg(h) - z||^2`` summed over the code dimension."""
        return ag.sum(ag.square(ag.stop_gradient(self.h_enc) - self.z), axis=-1)

    @property
    def vq_loss_commit(self) -> Tensor:
        """``||sg(z) - h||^2`` summed over the code dimension."""
        return ag.sum(ag.square(self.h_enc - ag.stop_gradient(self.z)), axis=-1)


def _cluster_sums(X: np.ndarray, assign: np.ndarray, J: int) -> np.ndarray:
    onehot = sparse.csr_matrix((np.ones(assign.size), (assign, np.arange(assign.size))), shape=(J, X.shape[0]))
    return np.asarray(onehot @ X)


def _require_ready(cb: Codebook, h: np.ndarray) -> None:
    if not cb.initialized:
        raise StateError("codebook used before initialisation (run kmeans_init or set_vectors first)")
    if h.shape[-1] != cb.dim:
        raise ContractError(f"encoding dimension {h.shape[-1]} does not match codebook dimension {cb.dim}")


TIE_RTOL = 1e-9


def nearest(h: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the closest row of ``vectors`` for each row of ``h`` (first index wins ties).

    Distances come from the expanded ``|h|^2 - 2 h.z + |z|^2``.  Rows whose
    runner-up is within rounding distance of the winner are re-scored with
    summed squared differences, so near-ties are decided exactly.
    """
    h2 = np.atleast_2d(h)
    hh = (h2 * h2).sum(1)
    zz = (vectors * vectors).sum(1)
    d = hh[:, None] - 2.0 * ag.mm(h2, vectors.T) + zz[None, :]
    idx = np.argmin(d, axis=1)
    tol = TIE_RTOL * (hh + zz.max()) + 1e-300
    close = (d <= (d[np.arange(d.shape[0]), idx] + tol)[:, None]).sum(1) > 1
    for i in np.flatnonzero(close):
        diff = h2[i] - vectors
        idx[i] = np.argmin(np.einsum("jk,jk->j", diff, diff))
    return idx if h.ndim > 1 else idx[0].reshape(())


def quantize(h_enc, cb: Codebook) -> QuantizeResult:
    h_enc = ag.as_tensor(h_enc)
    _require_ready(cb, h_enc.data)
    index = nearest(h_enc.data, cb.vectors.data)
    z = ag.take(cb.vectors, np.atleast_1d(index))
    if h_enc.ndim == 1:
        z = ag.reshape(z, (cb.dim,))
    st = ag.straight_through(h_enc, z)
    return QuantizeResult(index=index, quantized=z.data, st_output=st, h_enc=h_enc, z=z)


def posterior(h_enc, cb: Codebook) -> np.ndarray:
    """One-hot categorical over codes, mass on the nearest entry."""
    h = ag.as_tensor(h_enc).data
    _require_ready(cb, h)
    idx = np.atleast_1d(nearest(h, cb.vectors.data))
    q = np.zeros((idx.size, cb.num_codes))
    q[np.arange(idx.size), idx] = 1.0
    return q if h.ndim > 1 else q[0]


def kl_to_uniform(q: np.ndarray) -> np.ndarray:
    """KL(q || uniform over J codes), with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    J = q.shape[-1]
    safe = np.where(q > 0, q, 1.0)
    return (q * (np.log(safe) + np.log(J))).sum(axis=-1)


def vq_loss(result: QuantizeResult, cb: Codebook, use_ema: bool | None = None) -> Tensor:
    use_ema = cb.use_ema if use_ema is None else use_ema
    commit = cb.commitment_cost * result.vq_loss_commit
    if use_ema:
        return commit
    return result.vq_loss_codebook + commit


def kmeans_init(cb: Codebook, encodings: np.ndarray, iters: int = 10,
                rng: np.random.Generator | None = None) -> None:
    if cb.initialized:
        raise StateError("codebook already initialised")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(encodings, dtype=np.float64).reshape(-1, cb.dim)
    M, J = X.shape[0], cb.num_codes
    if M < 1:
        raise ContractError("kmeans_init needs at least one encoding")
    if M < J:
        msg = f"kmeans_init: only {M} encodings for {J} codes; seeding with duplicated rows"
        logger.warning(msg)
        cb.warnings.append(msg)
        centroids = X[rng.choice(M, size=J, replace=True)].copy()
    else:
        centroids = X[rng.choice(M, size=J, replace=False)].copy()
    for _ in range(iters):
        assign = nearest(X, centroids)
        counts = np.bincount(assign, minlength=J)
        sums = _cluster_sums(X, assign, J)
        empty = counts == 0
        nonempty = ~empty
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if empty.any():
            centroids[empty] = X[rng.integers(0, M, size=int(empty.sum()))]
    counts = np.bincount(nearest(X, centroids), minlength=J).astype(np.float64)
    cb.set_vectors(centroids, counts)


def ema_update(cb: Codebook, encodings: np.ndarray, assignments: np.ndarray) -> None:
    if not cb.initialized:
        raise StateError("ema_update on an uninitialised codebook")
    X = np.asarray(encodings, dtype=np.float64).reshape(-1, cb.dim)
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if a.shape[0] != X.shape[0]:
        raise ContractError(f"{X.shape[0]} encodings but {a.shape[0]} assignments")
    if a.size and (a.min() < 0 or a.max() >= cb.num_codes):
        raise ContractError(f"assignment index out of range [0, {cb.num_codes})")
    g = cb.decay
    counts = np.bincount(a, minlength=cb.num_codes).astype(np.float64)
    sums = _cluster_sums(X, a, cb.num_codes)
    cb.ema_cluster_size = g * cb.ema_cluster_size + (1.0 - g) * counts
    cb.ema_sum = g * cb.ema_sum + (1.0 - g) * sums
    cb.vectors.data = cb.ema_sum / np.maximum(cb.ema_cluster_size, EMA_EPS)[:, None]


def update_cluster_size(cb: Codebook, assignments: np.ndarray) -> None:
    """EMA of assignment counts only; used when the codebook learns by gradient."""
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    counts = np.bincount(a, minlength=cb.num_codes).astype(np.float64)
    cb.ema_cluster_size = cb.decay * cb.ema_cluster_size + (1.0 - cb.decay) * counts


def replace_dead(cb: Codebook, encodings: np.ndarray, rng: np.random.Generator) -> int:
    if not cb.initialized:
        raise StateError("replace_dead on an uninitialised codebook")
    X = np.asarray(encodings, dtype=np.float64).reshape(-1, cb.dim)
    if X.shape[0] < 1:
        raise ContractError("replace_dead needs at least one encoding")
    dead = np.flatnonzero(cb.ema_cluster_size < cb.replace_threshold)
    if dead.size == 0:
        return 0
    rows = X[rng.integers(0, X.shape[0], size=dead.size)]
    vectors = cb.vectors.data.copy()
    vectors[dead] = rows
    cb.vectors.data = vectors
    cb.ema_cluster_size[dead] = 1.0
    cb.ema_sum[dead] = rows
    return int(dead.size)
