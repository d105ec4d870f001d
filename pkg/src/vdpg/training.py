"""Episodic meta-training, the ERM baseline, and unlabeled pretraining."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import (
    ConfigError,
    DomainPool,
    EmbeddingDataset,
    Episode,
    UnlabeledView,
    build_contrastive_batch,
    domain_probabilities,
    sample_episode,
)
from .evaluation import eval_model
from .losses import LossWeights, corr_loss, dac_loss, task_loss, total_loss

logger = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int | None = None
    base_lr: float = 3e-3
    n_support: int = 16
    n_query: int = 48
    C: int = 2
    per_domain: int = 8
    include_query_in_X: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    training_mode: str = "episodic"
    pretrain: bool = False
    pretrain_epochs: int = 10
    pretrain_lr: float | None = None
    freeze_generator: bool = False
    domain_sampling: str = "uniform"
    batch_size: int = 64
    momentum: float = 0.0
    weight_decay: float = 0.0
    checkpoint_dir: str | None = None
    val_fraction: float = 0.0  # held out per source domain for early stopping
    patience: int | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.training_mode not in ("episodic", "erm"):
            raise ConfigError(f"unknown training_mode {self.training_mode!r}")
        if self.n_support < 1 or self.n_query < 1:
            raise ConfigError("support and query sizes must be positive")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class LogEntry:
    step: int
    domain_id: int
    task: float
    corr: float
    dac: float
    total: float
    lr: float
    wall_time: float = 0.0
    phase: str = "train"

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    entries: list[LogEntry] = field(default_factory=list)

    def append(self, entry: LogEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries])

    def write(self, path, with_time: bool = False) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(with_time), sort_keys=True) + "\n")


# ---------------------------------------------------------------- loss assembly


@dataclass
class EpisodeBatch:
    """Concrete arrays for one optimisation step."""

    contrastive_tokens: np.ndarray
    contrastive_domains: np.ndarray
    support_slice: slice | None  # rows of the contrastive batch forming the support set
    query_tokens: np.ndarray | None = None
    query_labels: np.ndarray | None = None
    domain_id: int = -1


def episode_arrays(pool: DomainPool, ep: Episode) -> EpisodeBatch:
    x = ep.contrastive if ep.contrastive is not None else ep.support
    xd = ep.contrastive_domains if ep.contrastive_domains is not None else np.full(len(x), ep.domain_id)
    q_labels = None if pool.labels is None else pool.labels[ep.query]
    return EpisodeBatch(
        pool.tokens[x], xd, slice(0, len(ep.support)), pool.tokens[ep.query], q_labels, ep.domain_id
    )


def episode_loss(p: dict[str, T.Tensor], cfg: M.ModelConfig, batch: EpisodeBatch, w: LossWeights):
    """Total loss and its components for one episode."""
    prompts = M.per_image_prompts(p, cfg, batch.contrastive_tokens)
    dac = dac_loss(prompts, batch.contrastive_domains, w.tau, w.dac_distance) if w.gamma_dac else T.Tensor(0.0)
    corr = corr_loss(p["bank"], w.corr_norm) if w.lambda_corr else T.Tensor(0.0)
    if batch.query_tokens is None:
        task = T.Tensor(0.0)
    else:
        prompt = M.pool_prompts(prompts[batch.support_slice])
        pred = M.guide_and_predict(p, cfg, prompt, batch.query_tokens)
        task = task_loss(pred, batch.query_labels, cfg.task)
    return total_loss(task, corr, dac, w), task, corr, dac


def _check_finite(step: int, total, task, corr, dac) -> None:
    vals = [float(v.data) for v in (total, task, corr, dac)]
    if not all(math.isfinite(v) for v in vals):
        raise NumericalError(
            f"non-finite loss at step {step}: total={vals[0]} task={vals[1]} corr={vals[2]} dac={vals[3]}"
        )


def optimise_step(
    params: M.ModelParameters,
    batch: EpisodeBatch,
    weights: LossWeights,
    opt: T.OptimizerState,
    trainable: Sequence[str] | None = None,
    phase: str = "train",
) -> tuple[M.ModelParameters, LogEntry]:
    t0 = time.perf_counter()
    p = params.tensors
    with T.Tape() as tape:
        total, task, corr, dac = episode_loss(p, params.config, batch, weights)
    _check_finite(opt.step, total, task, corr, dac)
    names = list(p) if trainable is None else list(trainable)
    grads = tape.backward(total, {n: p[n] for n in names})
    lr = opt.lr()
    step = opt.step
    new = T.sgd_step(p, grads, opt, names)
    entry = LogEntry(
        step=step,
        domain_id=int(batch.domain_id),
        task=float(task.data),
        corr=float(corr.data),
        dac=float(dac.data),
        total=float(total.data),
        lr=lr,
        wall_time=time.perf_counter() - t0,
        phase=phase,
    )
    return params.with_tensors(new), entry


def train_episode(params, pool: DomainPool, episode: Episode, weights: LossWeights, opt, trainable=None):
    if len(np.intersect1d(episode.support, episode.query)):
        raise ValueError("support and query overlap")
    return optimise_step(params, episode_arrays(pool, episode), weights, opt, trainable)


# ---------------------------------------------------------------- loops


def _as_list(datasets) -> list:
    if isinstance(datasets, (EmbeddingDataset, UnlabeledView)):
        return [datasets]
    return list(datasets)


def _check_compat(datasets: list[EmbeddingDataset], mcfg: M.ModelConfig) -> None:
    if not datasets:
        raise ConfigError("no source datasets given")
    for ds in datasets:
        if ds.d != mcfg.d:
            raise ConfigError(f"dataset d={ds.d} does not match model d={mcfg.d}")
        if isinstance(ds, EmbeddingDataset) and ds.task != mcfg.task:
            raise ConfigError(f"dataset task {ds.task!r} does not match model task {mcfg.task!r}")


def default_episodes_per_epoch(pool: DomainPool, batch_size: int = 64) -> int:
    return max(1, math.ceil(len(pool.tokens) / batch_size))


def _trainable(params: M.ModelParameters, cfg: TrainConfig) -> list[str]:
    names = params.names()
    if cfg.freeze_generator:
        frozen = set(M.generator_names(params))
        names = [n for n in names if n not in frozen]
    return names


def _save(params, cfg: TrainConfig, name: str, meta: dict) -> None:
    if not cfg.checkpoint_dir:
        return
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "weights": asdict(cfg.weights), **meta}
    M.save_checkpoint(params, meta, out / name)


def _split_validation(datasets, fraction: float, seed: int):
    """Hold out ``fraction`` of every source domain; returns (train, validation)."""
    if fraction == 0:
        return datasets, []
    rng = np.random.default_rng([seed, 4])
    train_parts, val_parts = [], []
    for ds in datasets:
        for dom in ds.domains:
            sub = ds.domain(dom)
            perm = rng.permutation(len(sub))
            n_val = int(math.ceil(fraction * len(sub)))
            val_parts.append(sub.subset(np.sort(perm[:n_val])))
            train_parts.append(sub.subset(np.sort(perm[n_val:])))
    return train_parts, val_parts


class _EpochMonitor:
    """Per-epoch checkpoints plus optional early stopping on held-out source records."""

    def __init__(self, cfg: TrainConfig, validation: list[EmbeddingDataset]):
        self.cfg = cfg
        self.validation = validation
        self.best: M.ModelParameters | None = None
        self.best_score = -math.inf
        self.stale = 0
        self.scores: list[float] = []

    def end_epoch(self, params: M.ModelParameters, epoch: int, step: int) -> bool:
        """Returns True when training should stop early."""
        _save(params, self.cfg, f"epoch_{epoch:03d}.ckpt", {"epoch": epoch, "step": step, "final": False})
        if not self.validation:
            return False
        m = eval_model(params, self.validation, "adapt-per-domain", self.cfg.n_support, self.cfg.seed)
        score = m.accuracy if params.config.task == "classification" else -m.mse
        self.scores.append(score)
        logger.info("epoch %d validation score %.4f", epoch, score)
        if score > self.best_score:
            self.best, self.best_score, self.stale = params, score, 0
        else:
            self.stale += 1
        return self.cfg.patience is not None and self.stale >= self.cfg.patience

    def finish(self, params: M.ModelParameters, step: int) -> M.ModelParameters:
        out = self.best if self.best is not None else params
        _save(out, self.cfg, "final.ckpt", {"step": step, "final": True, "best_val": self.best_score if self.best else None})
        return out


def train(
    datasets,
    cfg: TrainConfig,
    model_cfg: M.ModelConfig,
    init: M.ModelParameters | None = None,
    unlabeled=None,
) -> tuple[M.ModelParameters, TrainLog]:
    """Episodic (or ERM, per ``cfg.training_mode``) training over source domains.

    With ``cfg.pretrain`` the generator and bank are first fitted on
    ``unlabeled`` (defaulting to the unlabeled view of ``datasets``).
    """
    cfg.validate()
    datasets = _as_list(datasets)
    _check_compat(datasets, model_cfg)
    params = init.copy() if init is not None else M.init_params(model_cfg, cfg.seed)
    log = TrainLog()
    if cfg.pretrain:
        source = unlabeled if unlabeled is not None else [ds.unlabeled_view() for ds in datasets]
        pre, pre_log = pretrain_unlabeled(source, cfg, model_cfg, init=params)
        params = M.transplant(params, pre, M.generator_names(pre))
        log.entries.extend(pre_log.entries)
    datasets, validation = _split_validation(datasets, cfg.val_fraction, cfg.seed)
    monitor = _EpochMonitor(cfg, validation)
    if cfg.training_mode == "erm":
        return _train_erm(datasets, cfg, params, log, monitor)

    pool = DomainPool.from_datasets(datasets)
    rng = np.random.default_rng([cfg.seed, 1])
    per_epoch = cfg.episodes_per_epoch or default_episodes_per_epoch(pool, cfg.batch_size)
    opt = T.OptimizerState(cfg.base_lr, cfg.epochs * per_epoch, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    probs = domain_probabilities(pool, cfg.domain_sampling)
    trainable = _trainable(params, cfg)
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            ep = sample_episode(pool, rng, cfg.n_support, cfg.n_query, probs)
            ep = build_contrastive_batch(pool, ep, rng, cfg.C, cfg.per_domain, cfg.include_query_in_X)
            params, entry = train_episode(params, pool, ep, cfg.weights, opt, trainable)
            log.append(entry)
        if monitor.end_epoch(params, epoch, opt.step):
            break
    return monitor.finish(params, opt.step), log


def train_erm(datasets, cfg: TrainConfig, model_cfg: M.ModelConfig, init=None):
    return train(datasets, replace(cfg, training_mode="erm"), model_cfg, init)


def _train_erm(datasets, cfg: TrainConfig, params: M.ModelParameters, log: TrainLog, monitor: _EpochMonitor):
    """Mixed-domain labelled batches; each record's prompt pools its own domain's batch members."""
    pool = DomainPool.from_datasets(datasets)
    rng = np.random.default_rng([cfg.seed, 2])
    per_epoch = cfg.episodes_per_epoch or default_episodes_per_epoch(pool, cfg.batch_size)
    opt = T.OptimizerState(cfg.base_lr, cfg.epochs * per_epoch, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    trainable = _trainable(params, cfg)
    n = len(pool.tokens)
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            params, entry = _erm_step(params, pool, idx, cfg.weights, opt, trainable)
            log.append(entry)
        if monitor.end_epoch(params, epoch, opt.step):
            break
    return monitor.finish(params, opt.step), log


def _erm_step(params, pool: DomainPool, idx: np.ndarray, w: LossWeights, opt, trainable):
    t0 = time.perf_counter()
    p = params.tensors
    mcfg = params.config
    tokens = pool.tokens[idx]
    doms = pool.domain_ids[idx]
    labels = pool.labels[idx]
    with T.Tape() as tape:
        prompts = M.per_image_prompts(p, mcfg, tokens)
        dac = dac_loss(prompts, doms, w.tau, w.dac_distance) if w.gamma_dac else T.Tensor(0.0)
        corr = corr_loss(p["bank"], w.corr_norm) if w.lambda_corr else T.Tensor(0.0)
        parts, order = [], []
        for dom in sorted(set(doms.tolist())):
            rows = np.flatnonzero(doms == dom)
            prompt = M.pool_prompts(prompts[rows])
            parts.append(M.guide_and_predict(p, mcfg, prompt, tokens[rows]))
            order.append(rows)
        pred = T.concat(parts, axis=0)
        task = task_loss(pred, labels[np.concatenate(order)], mcfg.task)
        total = total_loss(task, corr, dac, w)
    _check_finite(opt.step, total, task, corr, dac)
    grads = tape.backward(total, {n: p[n] for n in trainable})
    lr = opt.lr()
    step = opt.step
    new = T.sgd_step(p, grads, opt, trainable)
    entry = LogEntry(step, -1, float(task.data), float(corr.data), float(dac.data), float(total.data),
                     lr, time.perf_counter() - t0, "erm")
    return params.with_tensors(new), entry


def pretrain_unlabeled(
    unlabeled_datasets,
    cfg: TrainConfig,
    model_cfg: M.ModelConfig,
    init: M.ModelParameters | None = None,
) -> tuple[M.ModelParameters, TrainLog]:
    """Fit bank and generator with the decorrelation and contrastive terms only.

    Inputs are reduced to :class:`UnlabeledView` before sampling, so labels
    are never read.  Guidance and head parameters are left untouched.
    """
    views = [ds.unlabeled_view() if isinstance(ds, EmbeddingDataset) else ds for ds in _as_list(unlabeled_datasets)]
    pool = DomainPool.from_datasets(views)
    if len(pool.domains) < 2:
        raise ConfigError("pretraining needs unlabeled data from at least 2 domains")
    if pool.tokens.shape[-1] != model_cfg.d:
        raise ConfigError(f"unlabeled data d={pool.tokens.shape[-1]} does not match model d={model_cfg.d}")
    params = init.copy() if init is not None else M.init_params(model_cfg, cfg.seed)
    names = M.generator_names(params)
    rng = np.random.default_rng([cfg.seed, 3])
    per_epoch = cfg.episodes_per_epoch or default_episodes_per_epoch(pool, cfg.batch_size)
    lr = cfg.pretrain_lr if cfg.pretrain_lr is not None else cfg.base_lr
    opt = T.OptimizerState(lr, cfg.pretrain_epochs * per_epoch)
    w = cfg.weights
    log = TrainLog()
    for _ in range(cfg.pretrain_epochs * per_epoch):
        ep = sample_episode(pool, rng, cfg.n_support, cfg.n_query)
        ep = build_contrastive_batch(pool, ep, rng, cfg.C, cfg.per_domain, cfg.include_query_in_X)
        batch = episode_arrays(pool, ep)
        batch.query_tokens = None
        params, entry = optimise_step(params, batch, w, opt, names, phase="pretrain")
        log.append(entry)
    return params, log


def objective_gradcheck(
    model_cfg: M.ModelConfig,
    weights: LossWeights | None = None,
    contrastive_size: int = 6,
    n_query: int = 4,
    l: int = 4,
    seed: int = 0,
    eps: float = 1e-5,
    max_entries: int | None = None,
) -> float:
    """Max relative error between autodiff and finite differences of the episode loss.

    The contrastive batch splits evenly over two domains; its first half is
    the support set and the query set comes from the same domain.
    """
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    params = M.init_params(model_cfg, seed)
    half = contrastive_size // 2
    if half < 2:
        raise ConfigError("contrastive batch needs at least two records per domain")
    k = max(model_cfg.out_dim, 1)
    if model_cfg.task == "classification":
        labels = rng.integers(0, k, size=n_query)
    else:
        labels = rng.normal(size=n_query)
    batch = EpisodeBatch(
        contrastive_tokens=rng.normal(size=(contrastive_size, l, model_cfg.d)),
        contrastive_domains=np.repeat([0, 1], [half, contrastive_size - half]),
        support_slice=slice(0, half),
        query_tokens=rng.normal(size=(n_query, l, model_cfg.d)),
        query_labels=labels,
        domain_id=0,
    )
    p = params.tensors
    return T.grad_check(lambda: episode_loss(p, model_cfg, batch, weights)[0], p, eps=eps, max_entries=max_entries, seed=seed)
