"""Gradient-free adaptation, inference, and prompt diagnostics."""
from __future__ import annotations

import itertools
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import model as M
from .data import EmbeddingDataset, FormatError, concat_datasets
from .evaluation import Metrics, decide, eval_model, predict_with_prompt
from .losses import pairwise_distance
from .tensor import ContractError, Tensor

REPLACEMENTS = ("generated", "zeros", "random", "bank")


class GradientFreedomError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainPrompt:
    P: np.ndarray
    provenance: str = "generated"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape


def _tokens(records) -> np.ndarray:
    if isinstance(records, EmbeddingDataset):
        return records.tokens
    if isinstance(records, np.ndarray):
        return records[None] if records.ndim == 2 else records
    return np.stack([getattr(r, "tokens", r) for r in records])


def adapt(params: M.ModelParameters, unlabeled_records, k: int = 16) -> DomainPrompt:
    """Condense the bank into a prompt from the first ``min(k, n)`` records.

    Forward pass only; a parameter checksum is compared before and after.
    """
    tokens = _tokens(unlabeled_records)
    if len(tokens) == 0:
        raise ContractError("adapt needs at least one record")
    before = params.checksum()
    used = tokens[: min(k, len(tokens))]
    P = M.generate_prompt(params.tensors, params.config, used).data
    if params.checksum() != before:
        raise GradientFreedomError("parameters changed during adaptation")
    return DomainPrompt(P.copy(), "generated", {"n_condition": len(used)})


def infer(params: M.ModelParameters, prompt, records, batch_size: int = 256) -> np.ndarray:
    """Class indices (or regression values) for ``records`` under ``prompt``."""
    before = params.checksum()
    P = prompt.P if isinstance(prompt, DomainPrompt) else np.asarray(prompt)
    out = decide(predict_with_prompt(params, P, _tokens(records), batch_size), params.config.task)
    if params.checksum() != before:
        raise GradientFreedomError("parameters changed during inference")
    return out


def timed_infer(params, prompt, records) -> tuple[np.ndarray, float]:
    t0 = time.perf_counter()
    out = infer(params, prompt, records)
    return out, time.perf_counter() - t0


class PromptCache:
    """One prompt per domain key, generated once and reused."""

    def __init__(self):
        self._entries: dict = {}

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key) -> DomainPrompt:
        return self._entries[key]

    def put(self, key, prompt: DomainPrompt) -> None:
        if key in self._entries:
            raise KeyError(f"prompt for {key!r} already cached")
        self._entries[key] = prompt

    def get_or_adapt(self, key, params: M.ModelParameters, records, k: int = 16) -> DomainPrompt:
        if key not in self._entries:
            prompt = adapt(params, records, k)
            self._entries[key] = DomainPrompt(prompt.P, prompt.provenance, {**prompt.meta, "key": str(key), "created": time.time()})
        return self._entries[key]


# ---------------------------------------------------------------- replacements


def replacement_prompt(params: M.ModelParameters, kind: str, seed: int = 0) -> DomainPrompt:
    cfg = params.config
    if kind == "zeros":
        return DomainPrompt(np.zeros((cfg.Z, cfg.d)), "zeros")
    if kind == "random":
        rng = np.random.default_rng(seed)
        return DomainPrompt(rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.Z, cfg.d)), "random", {"seed": seed})
    if kind == "bank":
        return DomainPrompt(params.bank.copy(), "bank_copy")
    raise ValueError(f"unknown replacement {kind!r}")


def swap_prompt_eval(
    params: M.ModelParameters,
    target_datasets,
    replacements: Sequence[str] = REPLACEMENTS,
    k: int = 16,
    seed: int = 0,
) -> dict[str, Metrics]:
    """Evaluate target domains with generated prompts and each replacement."""
    out = {}
    for kind in replacements:
        if kind == "generated":
            out[kind] = eval_model(params, target_datasets, "adapt-per-domain", k, seed)
        else:
            P = replacement_prompt(params, kind, seed).P
            out[kind] = eval_model(params, target_datasets, "given-prompt", k, seed, prompts=P)
    return out


# ---------------------------------------------------------------- swaps & distances


def prompt_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared elementwise difference, matching the contrastive loss."""
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


@dataclass
class SwapResult:
    pairs: list[tuple[int, int, float, float]]  # (data domain, prompt domain, distance, accuracy drop)
    spearman: float


def _domain_prompts(params, ds: EmbeddingDataset, k: int, seed: int):
    rng = np.random.default_rng(seed)
    prompts, evals = {}, {}
    for dom in ds.domains:
        sub = ds.domain(dom)
        perm = rng.permutation(len(sub))
        prompts[dom] = adapt(params, sub.tokens[perm[:k]], k).P
        evals[dom] = sub.subset(perm[k:]) if len(sub) > k else sub
    return prompts, evals


def cross_domain_prompt_swap(
    params: M.ModelParameters, datasets, k: int = 16, seed: int = 0
) -> SwapResult:
    """Score each domain under every other domain's prompt.

    The drop is own-prompt metric minus swapped-prompt metric (accuracy, or
    Pearson r for regression).
    """
    ds = datasets if isinstance(datasets, EmbeddingDataset) else concat_datasets(list(datasets))
    prompts, evals = _domain_prompts(params, ds, k, seed)
    task = params.config.task

    def metric(dom_data, P):
        pred = infer(params, P, evals[dom_data].tokens)
        true = evals[dom_data].labels
        if task == "classification":
            return float(np.mean(pred == true))
        return float(np.corrcoef(pred, true)[0, 1])

    own = {d: metric(d, prompts[d]) for d in prompts}
    pairs = []
    for a, b in itertools.permutations(sorted(prompts), 2):
        pairs.append((a, b, prompt_distance(prompts[a], prompts[b]), own[a] - metric(a, prompts[b])))
    rho = float("nan")
    if len(pairs) >= 2:
        dist = [p[2] for p in pairs]
        drop = [p[3] for p in pairs]
        if np.std(dist) > 0 and np.std(drop) > 0:
            rho = float(spearmanr(dist, drop).correlation)
    return SwapResult(pairs, rho)


def swap_single(params, ds_a: EmbeddingDataset, ds_b: EmbeddingDataset, k: int = 16, seed: int = 0):
    """Accuracy drop of ``ds_a`` under ``ds_b``'s prompt and vice versa."""
    res = cross_domain_prompt_swap(params, [ds_a, ds_b], k, seed)
    return res.pairs


@dataclass
class DistanceReport:
    matrix: np.ndarray
    domains: list[int]
    intra: float
    inter: float
    same_class_cross_domain: float = float("nan")
    cross_class_same_domain: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "matrix": self.matrix.tolist(),
            "intra": self.intra,
            "inter": self.inter,
            "same_class_cross_domain": self.same_class_cross_domain,
            "cross_class_same_domain": self.cross_class_same_domain,
        }


def per_image_prompt_array(params: M.ModelParameters, tokens: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [
        M.per_image_prompts(params.tensors, params.config, tokens[i : i + batch_size]).data
        for i in range(0, len(tokens), batch_size)
    ]
    return np.concatenate(out)


def prompt_distance_matrix(
    params: M.ModelParameters,
    datasets,
    level: str = "instance",
    k: int = 16,
    per_domain: int = 64,
    seed: int = 0,
) -> DistanceReport:
    """Domain- or instance-level prompt distances.

    ``domain``: distances between per-domain adapted prompts; intra is the
    distance between two prompts adapted from disjoint halves of one domain.
    ``instance``: per-image prompt distances averaged within domain blocks
    (self pairs excluded).
    """
    ds = datasets if isinstance(datasets, EmbeddingDataset) else concat_datasets(list(datasets))
    rng = np.random.default_rng(seed)
    doms = ds.domains
    m = len(doms)
    if level == "domain":
        prompts, twins = {}, {}
        for dom in doms:
            sub = ds.domain(dom)
            perm = rng.permutation(len(sub))
            prompts[dom] = adapt(params, sub.tokens[perm[:k]], k).P
            twins[dom] = adapt(params, sub.tokens[perm[k : 2 * k]], k).P if len(sub) >= 2 * k else prompts[dom]
        mat = np.zeros((m, m))
        for i, j in itertools.combinations(range(m), 2):
            mat[i, j] = mat[j, i] = prompt_distance(prompts[doms[i]], prompts[doms[j]])
        intra = float(np.mean([prompt_distance(prompts[d], twins[d]) for d in doms]))
        inter = float(mat[~np.eye(m, dtype=bool)].mean()) if m > 1 else float("nan")
        return DistanceReport(mat, doms, intra, inter)
    if level != "instance":
        raise ValueError(f"unknown level {level!r}")

    picks = []
    for dom in doms:
        idx = np.flatnonzero(ds.domain_ids == dom)
        picks.append(rng.permutation(idx)[:per_domain])
    sel = np.concatenate(picks)
    P = per_image_prompt_array(params, ds.tokens[sel])
    dist = pairwise_distance(Tensor(P)).data
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    dist = np.maximum(dist, 0.0)
    dom_of = ds.domain_ids[sel]
    mat = np.zeros((m, m))
    for i, j in itertools.product(range(m), range(m)):
        block = dist[np.ix_(dom_of == doms[i], dom_of == doms[j])]
        if i == j:
            n = block.shape[0]
            mat[i, j] = block.sum() / max(n * (n - 1), 1)
        else:
            mat[i, j] = block.mean()
    intra = float(np.mean(np.diag(mat)))
    off = ~np.eye(m, dtype=bool)
    inter = float(mat[off].mean()) if m > 1 else float("nan")
    report = DistanceReport(mat, doms, intra, inter)
    if ds.task == "classification":
        lab = ds.labels[sel]
        same_dom = dom_of[:, None] == dom_of[None, :]
        same_cls = lab[:, None] == lab[None, :]
        not_self = ~np.eye(len(sel), dtype=bool)
        a = same_cls & ~same_dom
        b = ~same_cls & same_dom & not_self
        if a.any():
            report.same_class_cross_domain = float(dist[a].mean())
        if b.any():
            report.cross_class_same_domain = float(dist[b].mean())
    return report


def prompt_matrix_checks(mat: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.allclose(mat, mat.T, atol=tol) and np.all(np.diag(mat) == 0) and np.all(mat >= 0))


def bank_correlation(params_or_bank) -> np.ndarray:
    """Cosine-normalised Gram matrix of bank rows."""
    B = params_or_bank.bank if isinstance(params_or_bank, M.ModelParameters) else np.asarray(params_or_bank)
    norms = np.linalg.norm(B, axis=1, keepdims=True)
    U = B / np.where(norms > 0, norms, 1.0)
    C = U @ U.T
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def max_off_diagonal(C: np.ndarray) -> float:
    if len(C) < 2:
        return 0.0
    return float(np.abs(C[~np.eye(len(C), dtype=bool)]).max())


# ---------------------------------------------------------------- prompt files

_PROMPT_MAGIC = b"VDPP"
_PROMPT_VERSION = 1
_PROMPT_HEADER = struct.Struct("<4sHIIH")


def export_prompt(prompt: DomainPrompt, path) -> None:
    prov = prompt.provenance.encode()
    body = _PROMPT_HEADER.pack(_PROMPT_MAGIC, _PROMPT_VERSION, prompt.P.shape[0], prompt.P.shape[1], len(prov))
    body += prov + np.ascontiguousarray(prompt.P, dtype="<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def import_prompt(path) -> DomainPrompt:
    buf = Path(path).read_bytes()
    if len(buf) < _PROMPT_HEADER.size + 4:
        raise FormatError("truncated prompt file", len(buf))
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("prompt file checksum mismatch", len(buf) - 4)
    magic, version, Z, d, n = _PROMPT_HEADER.unpack_from(body, 0)
    if magic != _PROMPT_MAGIC:
        raise FormatError("not a prompt file (bad magic)", 0)
    if version != _PROMPT_VERSION:
        raise FormatError(f"unsupported prompt file version {version}", 4)
    if len(body) != _PROMPT_HEADER.size + n + 8 * Z * d:
        raise FormatError("prompt file length does not match its header", len(body))
    off = _PROMPT_HEADER.size
    prov = body[off : off + n].decode()
    P = np.frombuffer(body, dtype="<f8", count=Z * d, offset=off + n).reshape(Z, d).copy()
    return DomainPrompt(P, prov)
