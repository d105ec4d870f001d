"""YAML run configuration.

A run config has four sections mirroring the dataclasses they build:
``data`` (:class:`SyntheticConfig`), ``model`` (:class:`ModelConfig`),
``train`` (:class:`TrainConfig`, with loss weights nested under
``train.weights``) and ``eval``.  Missing keys take the documented default;
unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ConfigError, SyntheticConfig
from .evaluation import PROTOCOLS
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class EvalConfig:
    protocol: str = "adapt-per-domain"
    k: int = 16
    seed: int = 0


# Desk-scale benchmark defaults; these differ from the bare dataclass
# defaults where the small synthetic problem needs it.
BENCHMARK = {
    "data": {"num_unlabeled_domains": 12, "domain_shift_sigma": 2.0},
    "train": {"base_lr": 0.05},
}

PRESETS = {
    "default": BENCHMARK,
    "toy": {
        "data": {"d": 8, "l": 4, "num_classes": 3, "num_source_domains": 2, "num_target_domains": 1,
                 "samples_per_domain": 24, "domain_shift_rank": 2},
        "model": {"d": 8, "Z": 3, "num_heads": 2, "num_classes": 3},
        "train": {"epochs": 2, "n_support": 3, "n_query": 4, "C": 1, "per_domain": 3, "base_lr": 0.05},
        "eval": {"k": 4},
    },
}

KEY_DOCS = {
    "data.d": "embedding width",
    "data.l": "tokens per record",
    "data.num_classes": "number of classes (classification)",
    "data.num_source_domains": "labelled training domains",
    "data.num_target_domains": "held-out domains used for evaluation",
    "data.num_unlabeled_domains": "extra unlabeled domains available to pretraining",
    "data.samples_per_domain": "records generated per domain",
    "data.class_separation": "norm of the gap between two class means",
    "data.token_noise_sigma": "per-token isotropic noise",
    "data.domain_rotation_angle_max": "largest per-domain rotation angle (radians)",
    "data.domain_shift_sigma": "scale of the per-domain mean shift",
    "data.domain_shift_rank": "rank of the shift subspace (null: full width)",
    "data.domain_scale_range": "per-domain multiplicative scale interval",
    "data.task": "classification or regression",
    "data.seed": "generator seed",
    "model.d": "embedding width, must match the data",
    "model.Z": "rows of the knowledge bank and of every prompt",
    "model.num_heads": "attention heads; must divide d",
    "model.generator_blocks": "cross-attention blocks in the prompt generator",
    "model.guidance_blocks": "two-way blocks in the guidance module",
    "model.num_classes": "output classes",
    "model.task": "classification or regression",
    "model.residual": "residual connections around every sublayer",
    "model.norm": "layer norm before every sublayer",
    "model.ffn": "feed-forward sublayers",
    "model.ffn_mult": "hidden width multiplier of feed-forward sublayers",
    "train.epochs": "passes over the source data",
    "train.episodes_per_epoch": "episodes per epoch (null: ceil(records / batch_size))",
    "train.base_lr": "initial SGD learning rate; cosine-decayed to 0",
    "train.n_support": "unlabeled support records per episode",
    "train.n_query": "labelled query records per episode",
    "train.C": "other domains added to the contrastive batch",
    "train.per_domain": "records drawn from each of those domains",
    "train.include_query_in_X": "put query records in the contrastive batch too",
    "train.weights.lambda_corr": "weight of the bank decorrelation loss",
    "train.weights.gamma_dac": "weight of the domain-contrastive loss",
    "train.weights.tau": "contrastive temperature",
    "train.weights.corr_norm": "frobenius or squared",
    "train.weights.dac_distance": "mean_squared or euclidean",
    "train.seed": "initialisation and sampling seed",
    "train.training_mode": "episodic or erm",
    "train.pretrain": "fit bank and generator on unlabeled domains first",
    "train.pretrain_epochs": "epochs of unlabeled pretraining",
    "train.pretrain_lr": "pretraining learning rate (null: base_lr)",
    "train.freeze_generator": "keep bank and generator fixed during training",
    "train.domain_sampling": "uniform or size-proportional episode domains",
    "train.batch_size": "ERM batch size; also sets default episodes per epoch",
    "train.momentum": "SGD momentum",
    "train.weight_decay": "L2 weight decay",
    "train.checkpoint_dir": "per-epoch checkpoint directory (null: none)",
    "train.val_fraction": "share of each source domain held out for early stopping",
    "train.patience": "epochs without validation gain before stopping (null: never)",
    "eval.protocol": "adapt-per-domain, zero-prompt or given-prompt",
    "eval.k": "unlabeled records used to adapt each target domain",
    "eval.seed": "seed of the adaptation/evaluation split",
}


def _build(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**values)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict | None, base: str = "default") -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
        unknown = sorted(set(doc) - {"data", "model", "train", "eval"})
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
        doc = _merge(PRESETS[base], doc)
        for name in ("data", "model", "train", "eval"):
            if doc.get(name) is not None and not isinstance(doc[name], dict):
                raise ConfigError(f"section [{name}] must be a mapping")
        data = dict(doc.get("data") or {})
        if "domain_scale_range" in data:
            data["domain_scale_range"] = tuple(data["domain_scale_range"])
        train = dict(doc.get("train") or {})
        weights = train.pop("weights", None) or {}
        if not isinstance(weights, dict):
            raise ConfigError("train.weights must be a mapping")
        try:
            train["weights"] = _build(LossWeights, weights, "train.weights")
            cfg = cls(
                data=_build(SyntheticConfig, data, "data"),
                model=_build(ModelConfig, dict(doc.get("model") or {}), "model"),
                train=_build(TrainConfig, train, "train"),
                eval=_build(EvalConfig, dict(doc.get("eval") or {}), "eval"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, source: str | Path | None) -> "RunConfig":
        """Read a YAML file, or build a named preset (``default``, ``toy``)."""
        if source is None:
            return cls.from_dict({})
        if str(source) in PRESETS and not Path(source).exists():
            return cls.from_dict({}, base=str(source))
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config {source} not found (presets: {', '.join(PRESETS)})")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        try:
            self.data.validate()
            self.model.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.d != self.data.d:
            raise ConfigError(f"model.d={self.model.d} does not match data.d={self.data.d}")
        if self.model.task != self.data.task:
            raise ConfigError("model.task and data.task disagree")
        if self.model.task == "classification" and self.model.num_classes != self.data.num_classes:
            raise ConfigError("model.num_classes and data.num_classes disagree")
        if self.eval.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown eval.protocol {self.eval.protocol!r}")
        if self.eval.k < 1:
            raise ConfigError("eval.k must be >= 1")

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(
            dataclasses.replace(self.data, seed=seed),
            self.model,
            dataclasses.replace(self.train, seed=seed),
            dataclasses.replace(self.eval, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
        }

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def documented_defaults() -> str:
    """Every key with its default value and meaning, one per line."""
    flat = {}

    def walk(prefix, node):
        for key, val in node.items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, dict):
                walk(name, val)
            else:
                flat[name] = val

    walk("", RunConfig.from_dict({}).to_dict())
    width = max(map(len, flat))
    return "\n".join(f"{k:<{width}}  {flat[k]!r:<12}  {KEY_DOCS.get(k, '')}" for k in flat)
