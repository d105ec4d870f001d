"""Bank decorrelation, domain-aware contrastive, task and combined losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_corr: float = 0.1
    gamma_dac: float = 0.1
    tau: float = 0.1
    corr_norm: str = "frobenius"  # or "squared"
    dac_distance: str = "mean_squared"  # or "euclidean"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.corr_norm not in ("frobenius", "squared"):
            raise ValueError(f"unknown corr_norm {self.corr_norm!r}")
        if self.dac_distance not in ("mean_squared", "euclidean"):
            raise ValueError(f"unknown dac_distance {self.dac_distance!r}")


def corr_loss(bank, norm: str = "frobenius") -> Tensor:
    """Norm of the off-diagonal part of the bank's Gram matrix."""
    bank = T.as_tensor(bank)
    gram = bank @ T.transpose(bank)
    off = gram * (1.0 - np.eye(bank.shape[0]))
    energy = T.sum_(T.square(off))
    return T.sqrt(energy) if norm == "frobenius" else energy


def pairwise_distance(prompts: Tensor, metric: str = "mean_squared") -> Tensor:
    """(n, n) distances between flattened prompts."""
    n = prompts.shape[0]
    flat = T.reshape(prompts, (n, -1))
    if metric == "mean_squared":
        # expanded form avoids the (n, n, Z*d) difference tensor
        norms = T.sum_(T.square(flat), axis=-1, keepdims=True)
        sq = norms + T.transpose(norms) - T.scale(flat @ T.transpose(flat), 2.0)
        return T.scale(sq, 1.0 / flat.shape[1])
    diff = T.reshape(flat, (n, 1, -1)) - T.reshape(flat, (1, n, -1))
    # sqrt of zero distances on the diagonal is masked out downstream
    return T.sqrt(T.sum_(T.square(diff), axis=-1))


def soft_nearest_neighbour(dist, domain_ids, tau: float = 0.1) -> Tensor:
    """Soft-nearest-neighbour loss from an (n, n) distance matrix.

    Rows without a same-domain partner are dropped from the average.
    """
    dist = T.as_tensor(dist)
    dom = np.asarray(domain_ids)
    n = len(dom)
    logits = T.scale(dist, -1.0 / tau)
    not_self = ~np.eye(n, dtype=bool)
    same = (dom[:, None] == dom[None, :]) & not_self
    rows = same.any(axis=1)
    num = T.masked_logsumexp(logits, same)
    den = T.masked_logsumexp(logits, not_self)
    ratio = (num - den)[np.flatnonzero(rows)]
    return T.scale(T.sum_(ratio), -1.0 / rows.sum())


def dac_loss(prompts, domain_ids, tau: float = 0.1, metric: str = "mean_squared") -> Tensor:
    """Domain-aware contrastive loss over per-image prompts.

    A batch with a single domain yields 0.
    """
    prompts = T.as_tensor(prompts)
    dom = np.asarray(domain_ids)
    n = prompts.shape[0]
    if len(dom) != n:
        raise ContractError(f"{n} prompts but {len(dom)} domain ids")
    if n < 2 or len(np.unique(dom)) < 2:
        logger.warning("domain-contrastive loss over a single domain is defined as 0")
        return Tensor(0.0)
    return soft_nearest_neighbour(pairwise_distance(prompts, metric), dom, tau)


def task_loss(pred, target, task: str = "classification") -> Tensor:
    pred = T.as_tensor(pred)
    target = np.asarray(target)
    if task == "classification":
        k = pred.shape[-1]
        t = target.astype(np.int64)
        if np.any(t < 0) or np.any(t >= k):
            raise ContractError(f"class targets must lie in [0, {k})")
        logp = T.log_softmax(pred, axis=-1)
        picked = logp[np.arange(len(t)), t]
        return T.scale(T.sum_(picked), -1.0 / len(t))
    if not np.all(np.isfinite(target)):
        raise ContractError("regression targets must be finite")
    return T.mean(T.square(pred - target.astype(np.float64)))


def total_loss(task, corr, dac, w: LossWeights) -> Tensor:
    return T.as_tensor(task) + T.scale(corr, w.lambda_corr) + T.scale(dac, w.gamma_dac)
