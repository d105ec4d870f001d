"""Metrics and the per-domain adaptation evaluation protocol."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import pearsonr
from sklearn.metrics import f1_score

from . import model as M
from .data import EmbeddingDataset, concat_datasets

logger = logging.getLogger(__name__)

PROTOCOLS = ("adapt-per-domain", "zero-prompt", "given-prompt")


@dataclass
class Metrics:
    n: int
    accuracy: float = float("nan")
    macro_f1: float = float("nan")
    mse: float = float("nan")
    pearson_r: float = float("nan")
    per_domain: dict[int, "Metrics"] = field(default_factory=dict)

    @property
    def worst_accuracy(self) -> float:
        vals = [m.accuracy for m in self.per_domain.values()]
        return min(vals) if vals else self.accuracy

    @property
    def worst_pearson_r(self) -> float:
        vals = [m.pearson_r for m in self.per_domain.values()]
        return min(vals) if vals else self.pearson_r

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mse": self.mse,
            "pearson_r": self.pearson_r,
        }
        if self.per_domain:
            out["worst_accuracy"] = self.worst_accuracy
            out["worst_pearson_r"] = self.worst_pearson_r
            out["per_domain"] = {str(k): v.to_dict() for k, v in self.per_domain.items()}
        return out


def score(pred: np.ndarray, target: np.ndarray, task: str, num_classes: int | None = None) -> Metrics:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if task == "classification":
        labels = None if num_classes is None else list(range(num_classes))
        return Metrics(
            n=len(target),
            accuracy=float(np.mean(pred == target)),
            macro_f1=float(f1_score(target, pred, labels=labels, average="macro", zero_division=0)),
        )
    r = float("nan")
    if len(target) > 1 and np.std(pred) > 0 and np.std(target) > 0:
        r = float(pearsonr(pred, target)[0])
    return Metrics(n=len(target), mse=float(np.mean((pred - target) ** 2)), pearson_r=r)


def predict_with_prompt(params: M.ModelParameters, prompt, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Raw model outputs (logits or regression values) under a fixed prompt."""
    cfg = params.config
    p = params.tensors
    prompt = np.asarray(getattr(prompt, "data", prompt))
    outs = [
        M.guide_and_predict(p, cfg, prompt, tokens[i : i + batch_size]).data
        for i in range(0, len(tokens), batch_size)
    ]
    return np.concatenate(outs, axis=0)


def decide(raw: np.ndarray, task: str) -> np.ndarray:
    return raw.argmax(axis=-1) if task == "classification" else raw


def adaptation_split(n: int, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (adaptation, evaluation) index sets for one domain."""
    if n <= k:
        logger.warning("domain has %d records, fewer than k=%d; adapting on all of them", n, k)
        idx = np.arange(n)
        return idx, idx
    perm = rng.permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def eval_model(
    params: M.ModelParameters,
    datasets: EmbeddingDataset | Sequence[EmbeddingDataset],
    protocol: str = "adapt-per-domain",
    k: int = 16,
    seed: int = 0,
    prompts: Mapping[int, np.ndarray] | np.ndarray | Callable | None = None,
) -> Metrics:
    """Per-domain evaluation.

    Every protocol holds out the same ``k`` adaptation records per domain
    (drawn from ``seed``) and scores the remainder, so protocols compare on
    identical records.  ``prompts`` for ``given-prompt`` is one prompt, a
    mapping domain -> prompt, or a callable ``(domain_id, adapt_tokens)``.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    ds = datasets if isinstance(datasets, EmbeddingDataset) else concat_datasets(list(datasets))
    cfg = params.config
    rng = np.random.default_rng(seed)
    per_domain = {}
    all_pred, all_true = [], []
    for dom in ds.domains:
        sub = ds.domain(dom)
        adapt_idx, eval_idx = adaptation_split(len(sub), k, rng)
        if protocol == "adapt-per-domain":
            prompt = M.generate_prompt(params.tensors, cfg, sub.tokens[adapt_idx]).data
        elif protocol == "zero-prompt":
            prompt = np.zeros((cfg.Z, cfg.d))
        elif callable(prompts):
            prompt = prompts(dom, sub.tokens[adapt_idx])
        elif isinstance(prompts, Mapping):
            prompt = prompts[dom]
        else:
            prompt = prompts
        pred = decide(predict_with_prompt(params, prompt, sub.tokens[eval_idx]), cfg.task)
        true = sub.labels[eval_idx]
        per_domain[dom] = score(pred, true, cfg.task, cfg.num_classes if cfg.task == "classification" else None)
        all_pred.append(pred)
        all_true.append(true)
    pred = np.concatenate(all_pred)
    true = np.concatenate(all_true)
    out = score(pred, true, cfg.task, cfg.num_classes if cfg.task == "classification" else None)
    out.per_domain = per_domain
    return out
