"""Replacement, training-scheme, loss and diagnostic studies on the synthetic benchmark.

Each seed trains a small family of variants once; every study reads from
that family so the suites stay consistent with one another.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

from . import model as M
from .adaptation import (
    bank_correlation,
    cross_domain_prompt_swap,
    max_off_diagonal,
    prompt_distance_matrix,
    swap_prompt_eval,
)
from .config import RunConfig
from .data import SyntheticBenchmark, SyntheticConfig, synth_generate
from .evaluation import eval_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

VARIANTS = ("task_only", "corr", "full", "pretrain", "erm")
LOSS_LADDER = ("task_only", "corr", "full", "pretrain")


def benchmark_config(seed: int = 0, **overrides) -> SyntheticConfig:
    """Default desk-scale benchmark: d=16, K=5, 6 source and 3 target domains."""
    return replace(RunConfig.load("default").data, seed=seed, **overrides)


def benchmark_train_config(seed: int = 0, **overrides) -> TrainConfig:
    return replace(RunConfig.load("default").train, seed=seed, **overrides)


def benchmark_model_config(**overrides) -> M.ModelConfig:
    return replace(RunConfig.load("default").model, **overrides)


def variant_train_config(base: TrainConfig, variant: str) -> TrainConfig:
    w = base.weights
    if variant == "task_only":
        return replace(base, weights=replace(w, lambda_corr=0.0, gamma_dac=0.0))
    if variant == "corr":
        return replace(base, weights=replace(w, gamma_dac=0.0))
    if variant == "full":
        return base
    if variant == "pretrain":
        return replace(base, pretrain=True)
    if variant == "erm":
        return replace(base, training_mode="erm")
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class SeedRun:
    seed: int
    bench: SyntheticBenchmark
    params: dict[str, M.ModelParameters] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def ood_accuracy(self, variant: str, k: int = 16) -> float:
        return eval_model(self.params[variant], self.bench.target, "adapt-per-domain", k, self.seed).accuracy


def run_seed(
    seed: int,
    variants=VARIANTS,
    synth: SyntheticConfig | None = None,
    tcfg: TrainConfig | None = None,
    mcfg: M.ModelConfig | None = None,
) -> SeedRun:
    synth = synth or benchmark_config(seed)
    tcfg = tcfg or benchmark_train_config(seed)
    mcfg = mcfg or benchmark_model_config()
    bench = synth_generate(synth)
    run = SeedRun(seed, bench)
    for v in variants:
        t0 = time.perf_counter()
        cfg = variant_train_config(tcfg, v)
        unlabeled = None
        if cfg.pretrain:
            unlabeled = [ds.unlabeled_view() for ds in bench.source + bench.unlabeled]
        run.params[v], _ = train(bench.source, cfg, mcfg, unlabeled=unlabeled)
        run.seconds[v] = time.perf_counter() - t0
        logger.info("seed %d variant %s trained in %.1fs", seed, v, run.seconds[v])
    return run


# ---------------------------------------------------------------- studies


def replacement_study(run: SeedRun, variant: str = "full", k: int = 16) -> dict[str, float]:
    res = swap_prompt_eval(run.params[variant], run.bench.target, k=k, seed=run.seed)
    return {kind: m.accuracy for kind, m in res.items()}


def scheme_study(run: SeedRun, k: int = 16) -> dict[str, float]:
    return {v: run.ood_accuracy(v, k) for v in ("erm", "full")}


def loss_study(run: SeedRun, k: int = 16) -> dict[str, float]:
    return {v: run.ood_accuracy(v, k) for v in LOSS_LADDER}


def distance_study(run: SeedRun, variant: str = "full") -> dict:
    p = run.params[variant]
    inst = prompt_distance_matrix(p, run.bench.target, "instance", seed=run.seed)
    dom = prompt_distance_matrix(p, run.bench.target, "domain", seed=run.seed)
    return {"instance": inst, "domain": dom}


def swap_study(run: SeedRun, variant: str = "full", k: int = 16):
    return cross_domain_prompt_swap(run.params[variant], run.bench.target, k, run.seed)


def bank_study(run: SeedRun) -> dict[str, float]:
    return {
        "with_corr": max_off_diagonal(bank_correlation(run.params["corr"])),
        "without_corr": max_off_diagonal(bank_correlation(run.params["task_only"])),
    }


# ---------------------------------------------------------------- ordering rules


def replacement_holds(acc: dict[str, float], margin: float = 0.05) -> bool:
    """Generated prompt beats every replacement, and the best one by ``margin``."""
    others = [acc[k] for k in acc if k != "generated"]
    return acc["generated"] - max(others) >= margin


def monotone_with_one_tie(values, tie: float = 0.02) -> bool:
    """Non-decreasing sequence, tolerating one adjacent inversion of at most ``tie``."""
    drops = [a - b for a, b in zip(values, values[1:]) if b < a]
    return len(drops) == 0 or (len(drops) == 1 and drops[0] <= tie)


def majority(flags) -> bool:
    flags = list(flags)
    return sum(bool(f) for f in flags) * 2 > len(flags)
