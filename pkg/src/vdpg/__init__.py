"""Few-shot test-time domain adaptation over frozen token embeddings."""
from .adaptation import DomainPrompt, PromptCache, adapt, export_prompt, import_prompt, infer
from .config import RunConfig
from .data import (
    ConfigError,
    EmbeddingDataset,
    FormatError,
    SyntheticConfig,
    read_dataset,
    synth_generate,
    write_dataset,
)
from .estimator import DomainPromptClassifier, DomainPromptRegressor
from .evaluation import Metrics, eval_model
from .losses import LossWeights
from .model import ModelConfig, ModelParameters, init_params, load_checkpoint, save_checkpoint
from .training import NumericalError, TrainConfig, pretrain_unlabeled, train, train_erm

__all__ = [
    "ConfigError",
    "DomainPrompt",
    "DomainPromptClassifier",
    "DomainPromptRegressor",
    "EmbeddingDataset",
    "FormatError",
    "LossWeights",
    "Metrics",
    "ModelConfig",
    "ModelParameters",
    "NumericalError",
    "PromptCache",
    "RunConfig",
    "SyntheticConfig",
    "TrainConfig",
    "adapt",
    "eval_model",
    "export_prompt",
    "import_prompt",
    "infer",
    "init_params",
    "load_checkpoint",
    "pretrain_unlabeled",
    "read_dataset",
    "save_checkpoint",
    "synth_generate",
    "train",
    "train_erm",
    "write_dataset",
]
