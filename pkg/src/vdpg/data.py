"""Embedding datasets: binary format, synthetic domain-shift benchmark, samplers.

A dataset holds per-record token matrices of shape ``(l, d)`` produced by a
frozen encoder, each tagged with a domain id and (optionally) a label.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

logger = logging.getLogger(__name__)

MAGIC = b"VDPG"
FORMAT_VERSION = 1
UNLABELED = -1

TASKS = ("classification", "regression")
STORAGES = ("f32", "f64")

# magic, version, d, l, num_records, num_classes, task, storage
_HEADER = struct.Struct("<4sHIIQIBB")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size + _CRC.size


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHeader:
    d: int
    l: int
    num_records: int
    num_classes: int = 0
    task: str = "classification"
    storage: str = "f64"
    format_version: int = FORMAT_VERSION
    magic: bytes = MAGIC

    def pack(self) -> bytes:
        body = _HEADER.pack(
            self.magic,
            self.format_version,
            self.d,
            self.l,
            self.num_records,
            self.num_classes,
            TASKS.index(self.task),
            STORAGES.index(self.storage),
        )
        return body + _CRC.pack(zlib.crc32(body))

    @property
    def record_size(self) -> int:
        width = 4 if self.storage == "f32" else 8
        return 4 + 8 + self.l * self.d * width


@dataclass(frozen=True)
class EmbeddingRecord:
    domain_id: int
    label: float | int
    tokens: np.ndarray

    @property
    def is_labeled(self) -> bool:
        return not (isinstance(self.label, (int, np.integer)) and self.label == UNLABELED)


@dataclass
class EmbeddingDataset:
    """Column-oriented store of records.

    ``tokens`` has shape ``(n, l, d)``; ``labels`` is int64 for classification
    (``-1`` = unlabeled) and float64 for regression.
    """

    tokens: np.ndarray
    domain_ids: np.ndarray
    labels: np.ndarray
    task: str = "classification"
    num_classes: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be (n, l, d), got {self.tokens.shape}")
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        dtype = np.int64 if self.task == "classification" else np.float64
        self.labels = np.asarray(self.labels, dtype=dtype)
        n = len(self.tokens)
        if len(self.domain_ids) != n or len(self.labels) != n:
            raise ValueError("tokens, domain_ids and labels disagree on record count")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and n:
            lab = self.labels[self.labels != UNLABELED]
            if lab.size and (lab.min() < 0 or lab.max() >= max(self.num_classes, 1)):
                raise ValueError("classification labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def l(self) -> int:
        return self.tokens.shape[1]

    @property
    def d(self) -> int:
        return self.tokens.shape[2]

    @property
    def domains(self) -> list[int]:
        return sorted(set(self.domain_ids.tolist()))

    def __getitem__(self, i: int) -> EmbeddingRecord:
        label = self.labels[i]
        label = int(label) if self.task == "classification" else float(label)
        return EmbeddingRecord(int(self.domain_ids[i]), label, self.tokens[i])

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "EmbeddingDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EmbeddingDataset(
            self.tokens[idx], self.domain_ids[idx], self.labels[idx], self.task, self.num_classes
        )

    def domain(self, domain_id: int) -> "EmbeddingDataset":
        return self.subset(np.flatnonzero(self.domain_ids == domain_id))

    def header(self, storage: str = "f64") -> DatasetHeader:
        return DatasetHeader(
            d=self.d,
            l=self.l,
            num_records=len(self),
            num_classes=self.num_classes if self.task == "classification" else 0,
            task=self.task,
            storage=storage,
        )

    def unlabeled_view(self) -> "UnlabeledView":
        return UnlabeledView(self.tokens, self.domain_ids)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.tokens, self.domain_ids, self.labels):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def from_records(
        cls, records: Sequence[EmbeddingRecord], task: str = "classification", num_classes: int = 0
    ) -> "EmbeddingDataset":
        if not records:
            raise ValueError("from_records needs at least one record")
        return cls(
            np.stack([r.tokens for r in records]),
            [r.domain_id for r in records],
            [r.label for r in records],
            task,
            num_classes,
        )

    @classmethod
    def empty(cls, l: int, d: int, task: str = "classification", num_classes: int = 0):
        labels = np.zeros(0, dtype=np.int64 if task == "classification" else np.float64)
        return cls(np.zeros((0, l, d)), np.zeros(0, dtype=np.int64), labels, task, num_classes)


@dataclass(frozen=True)
class UnlabeledView:
    """Tokens and domain ids only; there is deliberately no way to reach labels."""

    tokens: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def concat_datasets(datasets: Sequence[EmbeddingDataset]) -> EmbeddingDataset:
    first = datasets[0]
    return EmbeddingDataset(
        np.concatenate([ds.tokens for ds in datasets]),
        np.concatenate([ds.domain_ids for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        first.task,
        max(ds.num_classes for ds in datasets),
    )


# ---------------------------------------------------------------- binary IO


def write_dataset(dataset: EmbeddingDataset, path, storage: str = "f64") -> None:
    header = dataset.header(storage)
    dtype = "<f4" if storage == "f32" else "<f8"
    label_dtype = "<i8" if dataset.task == "classification" else "<f8"
    rec = np.dtype(
        [("domain", "<u4"), ("label", label_dtype), ("tokens", dtype, (dataset.l * dataset.d,))]
    )
    table = np.empty(len(dataset), dtype=rec)
    table["domain"] = dataset.domain_ids
    table["label"] = dataset.labels
    table["tokens"] = dataset.tokens.reshape(len(dataset), dataset.l * dataset.d)
    with open(path, "wb") as fh:
        fh.write(header.pack())
        fh.write(table.tobytes())


def _read_header(buf: bytes) -> DatasetHeader:
    if len(buf) < HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    magic, version, d, l, n, k, task, storage = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    (crc,) = _CRC.unpack_from(buf, _HEADER.size)
    if crc != zlib.crc32(buf[: _HEADER.size]):
        raise FormatError("header checksum mismatch", _HEADER.size)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if task >= len(TASKS):
        raise FormatError(f"unknown task code {task}", 26)
    if storage >= len(STORAGES):
        raise FormatError(f"unknown storage code {storage}", 27)
    return DatasetHeader(d, l, n, k, TASKS[task], STORAGES[storage], version)


def read_dataset(path) -> tuple[DatasetHeader, EmbeddingDataset]:
    buf = Path(path).read_bytes()
    header = _read_header(buf)
    expected = HEADER_SIZE + header.num_records * header.record_size
    if len(buf) < expected:
        raise FormatError("truncated record payload", len(buf))
    if len(buf) > expected:
        raise FormatError("trailing bytes after last record", expected)
    dtype = "<f4" if header.storage == "f32" else "<f8"
    label_dtype = "<i8" if header.task == "classification" else "<f8"
    rec = np.dtype(
        [("domain", "<u4"), ("label", label_dtype), ("tokens", dtype, (header.l * header.d,))]
    )
    table = np.frombuffer(buf, dtype=rec, count=header.num_records, offset=HEADER_SIZE)
    ds = EmbeddingDataset(
        table["tokens"].astype(np.float64).reshape(header.num_records, header.l, header.d),
        table["domain"].astype(np.int64),
        table["label"],
        header.task,
        header.num_classes,
    )
    return header, ds


def import_manifest(manifest_path) -> EmbeddingDataset:
    """Build a dataset from a plain-text manifest plus raw float dumps.

    Manifest layout::

        # comments allowed
        d 768
        l 8
        task classification      # or regression
        num_classes 10           # classification only
        dtype f32                # f32 or f64, little-endian raw dumps
        tokens/img0001.bin 3 7   # <path> <domain_id> <label or -1>

    Paths are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    meta: dict[str, str] = {}
    rows: list[tuple[str, int, str]] = []
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] in ("d", "l", "task", "num_classes", "dtype") and len(parts) == 2:
            meta[parts[0]] = parts[1]
        elif len(parts) == 3:
            rows.append((parts[0], int(parts[1]), parts[2]))
        else:
            raise ConfigError(f"{manifest_path}:{lineno}: cannot parse {raw!r}")
    try:
        d, l = int(meta["d"]), int(meta["l"])
    except KeyError as exc:
        raise ConfigError(f"manifest missing {exc.args[0]!r}") from None
    task = meta.get("task", "classification")
    dtype = "<f4" if meta.get("dtype", "f32") == "f32" else "<f8"
    num_classes = int(meta.get("num_classes", 0))
    if not rows:
        return EmbeddingDataset.empty(l, d, task, num_classes)
    tokens = np.empty((len(rows), l, d))
    for i, (rel, _, _) in enumerate(rows):
        arr = np.fromfile(manifest_path.parent / rel, dtype=dtype)
        if arr.size != l * d:
            raise FormatError(f"{rel}: expected {l * d} floats, found {arr.size}", arr.nbytes)
        tokens[i] = arr.reshape(l, d)
    cast = int if task == "classification" else float
    return EmbeddingDataset(
        tokens, [r[1] for r in rows], [cast(r[2]) for r in rows], task, num_classes
    )


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticConfig:
    d: int = 16
    l: int = 8
    num_classes: int = 5
    num_source_domains: int = 6
    num_target_domains: int = 3
    num_unlabeled_domains: int = 0
    samples_per_domain: int = 300
    class_separation: float = 4.0
    token_noise_sigma: float = 1.0
    domain_rotation_angle_max: float = 0.6
    domain_shift_sigma: float = 1.5
    domain_shift_rank: int | None = 3
    domain_scale_range: tuple[float, float] = (0.7, 1.4)
    task: str = "classification"
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1 and self.task == "classification":
            raise ConfigError("num_classes must be >= 1")
        if self.samples_per_domain < 1:
            raise ConfigError("samples_per_domain must be >= 1")
        if self.d < 1 or self.l < 1:
            raise ConfigError("d and l must be >= 1")
        if self.num_source_domains < 2:
            raise ConfigError("need at least 2 source domains for the contrastive loss")
        if self.num_target_domains < 0 or self.num_unlabeled_domains < 0:
            raise ConfigError("domain counts must be non-negative")
        lo, hi = self.domain_scale_range
        if not 0 < lo <= hi:
            raise ConfigError("domain_scale_range must satisfy 0 < lo <= hi")
        if self.token_noise_sigma < 0 or self.domain_shift_sigma < 0:
            raise ConfigError("noise scales must be non-negative")
        if self.domain_shift_rank is not None and not 1 <= self.domain_shift_rank <= self.d:
            raise ConfigError("domain_shift_rank must lie in [1, d]")

    @property
    def no_shift(self) -> bool:
        lo, hi = self.domain_scale_range
        return self.domain_rotation_angle_max == 0 and self.domain_shift_sigma == 0 and lo == hi == 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["domain_scale_range"] = list(self.domain_scale_range)
        return out


@dataclass
class DomainTransform:
    rotation: np.ndarray
    shift: np.ndarray
    scale: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * x @ self.rotation.T + self.shift

    def invert(self, y: np.ndarray) -> np.ndarray:
        return ((y - self.shift) @ self.rotation) / self.scale


@dataclass
class GenerativeParams:
    class_means: np.ndarray
    noise_sigma: float
    transforms: dict[int, DomainTransform] = field(default_factory=dict)
    task: str = "classification"
    regression_axis: np.ndarray | None = None

    def save(self, path) -> None:
        ids = sorted(self.transforms)
        np.savez(
            path,
            class_means=self.class_means,
            noise_sigma=self.noise_sigma,
            domain_ids=np.array(ids, dtype=np.int64),
            rotations=np.stack([self.transforms[i].rotation for i in ids]),
            shifts=np.stack([self.transforms[i].shift for i in ids]),
            scales=np.array([self.transforms[i].scale for i in ids]),
            task=self.task,
            regression_axis=np.zeros(0) if self.regression_axis is None else self.regression_axis,
        )

    @classmethod
    def load(cls, path) -> "GenerativeParams":
        z = np.load(path)
        transforms = {
            int(i): DomainTransform(r, s, float(c))
            for i, r, s, c in zip(z["domain_ids"], z["rotations"], z["shifts"], z["scales"])
        }
        axis = z["regression_axis"]
        return cls(
            z["class_means"], float(z["noise_sigma"]), transforms, str(z["task"]),
            axis if axis.size else None,
        )


@dataclass
class SyntheticBenchmark:
    source: list[EmbeddingDataset]
    target: list[EmbeddingDataset]
    unlabeled: list[EmbeddingDataset]
    params: GenerativeParams
    config: SyntheticConfig


def _class_means(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    k, d, sep = cfg.num_classes, cfg.d, cfg.class_separation
    if k <= d:
        q, _ = np.linalg.qr(rng.standard_normal((d, k)))
        # orthonormal directions scaled so every pair sits exactly sep apart
        return q.T * (sep / np.sqrt(2.0))
    for _ in range(10_000):
        means = rng.standard_normal((k, d)) * sep
        dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if np.all(dist[np.triu_indices(k, 1)] >= sep):
            return means
    raise ConfigError("could not place class means with the requested separation")


def _random_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    if angle == 0 or d == 1:
        return np.eye(d)
    a = rng.standard_normal((d, d))
    skew = a - a.T
    # spectral norm of a real skew matrix is its largest rotation angle
    skew *= angle / np.linalg.norm(skew, 2)
    r = expm(skew)
    return r


def _shift_basis(cfg: SyntheticConfig, means: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal (d, r) basis the domain shifts live in.

    When the rank fits inside the span of the class means the basis is drawn
    from that span, so shifts are confounded with class identity.
    """
    r = cfg.domain_shift_rank
    if r is None:
        return np.eye(cfg.d)
    span = np.linalg.qr(means.T)[0] if cfg.task == "classification" else np.zeros((cfg.d, 0))
    if 0 < r <= span.shape[1] and np.linalg.matrix_rank(means) >= r:
        mix = np.linalg.qr(rng.standard_normal((span.shape[1], r)))[0]
        return span @ mix
    return np.linalg.qr(rng.standard_normal((cfg.d, r)))[0]


def synth_generate(cfg: SyntheticConfig) -> SyntheticBenchmark:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    means = _class_means(cfg, rng) if cfg.task == "classification" else np.zeros((1, cfg.d))
    axis = None
    if cfg.task == "regression":
        axis = rng.standard_normal(cfg.d)
        axis *= cfg.class_separation / np.linalg.norm(axis)
    params = GenerativeParams(means, cfg.token_noise_sigma, task=cfg.task, regression_axis=axis)

    shift_basis = _shift_basis(cfg, means, rng)
    n_total = cfg.num_source_domains + cfg.num_target_domains + cfg.num_unlabeled_domains
    lo, hi = cfg.domain_scale_range
    for dom in range(n_total):
        angle = rng.uniform(0, cfg.domain_rotation_angle_max)
        rot = _random_rotation(cfg.d, angle, rng)
        shift = shift_basis @ rng.standard_normal(shift_basis.shape[1]) * cfg.domain_shift_sigma
        scl = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        params.transforms[dom] = DomainTransform(rot, shift, scl)

    datasets = []
    n = cfg.samples_per_domain
    for dom in range(n_total):
        if cfg.task == "classification":
            labels = np.arange(n) % cfg.num_classes
            rng.shuffle(labels)
            latent = means[labels]
        else:
            labels = rng.uniform(-1.0, 1.0, size=n)
            latent = labels[:, None] * axis[None]
        noise = rng.standard_normal((n, cfg.l, cfg.d)) * cfg.token_noise_sigma
        tokens = params.transforms[dom].apply(latent[:, None, :] + noise)
        datasets.append(
            EmbeddingDataset(
                tokens, np.full(n, dom), labels, cfg.task,
                cfg.num_classes if cfg.task == "classification" else 0,
            )
        )
    ns, nt = cfg.num_source_domains, cfg.num_target_domains
    unl = []
    for ds in datasets[ns + nt :]:
        fill = UNLABELED if cfg.task == "classification" else np.nan
        unl.append(EmbeddingDataset(ds.tokens, ds.domain_ids, np.full(len(ds), fill), ds.task, ds.num_classes))
    return SyntheticBenchmark(datasets[:ns], datasets[ns : ns + nt], unl, params, cfg)


def bayes_oracle(params: GenerativeParams, record: EmbeddingRecord):
    """Exact posterior-mode label for a synthetic record (uniform class prior).

    Ties within a relative 1e-9 resolve to the lowest class index.
    """
    try:
        tf = params.transforms[int(record.domain_id)]
    except KeyError:
        raise KeyError(f"unknown domain_id {record.domain_id}") from None
    latent = tf.invert(np.asarray(record.tokens)).mean(axis=0)
    if params.task == "regression":
        axis = params.regression_axis
        return float(latent @ axis / (axis @ axis))
    # isotropic Gaussian tokens: log-likelihood ranks classes by distance of the token mean
    scores = ((params.class_means - latent) ** 2).sum(axis=1)
    best = scores.min()
    return int(np.flatnonzero(scores <= best + 1e-9 * max(1.0, abs(best)))[0])


def oracle_accuracy(params: GenerativeParams, dataset: EmbeddingDataset) -> float:
    preds = np.array([bayes_oracle(params, r) for r in dataset])
    return float(np.mean(preds == dataset.labels)) if len(dataset) else float("nan")


# ---------------------------------------------------------------- sampling


@dataclass
class DomainPool:
    """Records grouped by domain id for fast episodic sampling.

    ``labels`` is None for pools built from an :class:`UnlabeledView`.
    """

    tokens: np.ndarray
    domain_ids: np.ndarray
    labels: np.ndarray | None
    by_domain: dict[int, np.ndarray]

    @classmethod
    def from_datasets(cls, datasets) -> "DomainPool":
        if isinstance(datasets, (EmbeddingDataset, UnlabeledView)):
            datasets = [datasets]
        tokens = np.concatenate([ds.tokens for ds in datasets])
        dom = np.concatenate([ds.domain_ids for ds in datasets])
        labels = None
        if all(isinstance(ds, EmbeddingDataset) for ds in datasets):
            labels = np.concatenate([ds.labels for ds in datasets])
        by_domain = {int(k): np.flatnonzero(dom == k) for k in sorted(set(dom.tolist()))}
        return cls(tokens, dom, labels, by_domain)

    @property
    def domains(self) -> list[int]:
        return list(self.by_domain)

    def sizes(self) -> np.ndarray:
        return np.array([len(self.by_domain[k]) for k in self.by_domain])


@dataclass
class Episode:
    domain_id: int
    support: np.ndarray  # record indices into the pool
    query: np.ndarray
    contrastive: np.ndarray | None = None  # record indices forming X
    contrastive_domains: np.ndarray | None = None


def domain_probabilities(pool: DomainPool, mode: str = "uniform") -> np.ndarray:
    if mode == "uniform":
        return np.full(len(pool.by_domain), 1.0 / len(pool.by_domain))
    if mode == "size":
        s = pool.sizes().astype(float)
        return s / s.sum()
    raise ConfigError(f"unknown domain sampling mode {mode!r}")


def _fit_sizes(available: int, n_support: int, n_query: int) -> tuple[int, int]:
    if available >= n_support + n_query:
        return n_support, n_query
    q = max(8, available - n_support)
    if n_support + q <= available:
        return n_support, q
    s = max(4, available - 8)
    if s + 8 <= available:
        return s, 8
    raise ConfigError(f"domain has {available} records, needs at least 12 for an episode")


def sample_episode(
    pool: DomainPool,
    rng: np.random.Generator,
    n_support: int = 16,
    n_query: int = 48,
    probs: np.ndarray | None = None,
) -> Episode:
    domains = pool.domains
    p = domain_probabilities(pool) if probs is None else probs
    dom = domains[int(rng.choice(len(domains), p=p))]
    idx = pool.by_domain[dom]
    ns, nq = _fit_sizes(len(idx), n_support, n_query)
    if (ns, nq) != (n_support, n_query):
        logger.warning("domain %d has %d records; episode shrunk to %d+%d", dom, len(idx), ns, nq)
    pick = rng.permutation(idx)[: ns + nq]
    return Episode(dom, pick[:ns], pick[ns:])


def build_contrastive_batch(
    pool: DomainPool,
    episode: Episode,
    rng: np.random.Generator,
    C: int = 2,
    per_domain: int = 8,
    include_query: bool = True,
) -> Episode:
    others = [d for d in pool.domains if d != episode.domain_id]
    if C > len(others):
        logger.warning("only %d other domains available; C clamped from %d", len(others), C)
        C = len(others)
    parts = [episode.support]
    if include_query:
        parts.append(episode.query)
    own = np.concatenate(parts)
    doms = [np.full(len(own), episode.domain_id)]
    chosen = rng.choice(len(others), size=C, replace=False) if C else []
    for j in chosen:
        d = others[int(j)]
        idx = pool.by_domain[d]
        take = rng.permutation(idx)[: min(per_domain, len(idx))]
        parts.append(take)
        doms.append(np.full(len(take), d))
    x = np.concatenate(parts)
    xd = np.concatenate(doms)
    if len(set(xd.tolist())) < 2:
        logger.warning("contrastive batch covers a single domain; domain-contrastive term is 0")
    return Episode(episode.domain_id, episode.support, episode.query, x, xd)
