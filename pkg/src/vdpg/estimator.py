"""scikit-learn style wrappers around training and gradient-free adaptation.

``fit`` takes token embeddings ``(n, l, d)``, targets and per-record domain
ids; ``predict`` adapts once per domain present in the batch, using up to
``k`` of that domain's records as the unlabeled conditioning set.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .adaptation import adapt
from .data import EmbeddingDataset
from .evaluation import predict_with_prompt
from .losses import LossWeights
from .tensor import softmax
from .training import TrainConfig, train
from .validation import check_domains, check_labels, check_tokens


class _PromptedEstimator(BaseEstimator):
    _task = "classification"

    def __init__(
        self,
        n_prompts: int = 5,
        num_heads: int = 8,
        generator_blocks: int = 2,
        guidance_blocks: int = 2,
        epochs: int = 30,
        base_lr: float = 0.05,
        n_support: int = 16,
        n_query: int = 48,
        lambda_corr: float = 0.1,
        gamma_dac: float = 0.1,
        tau: float = 0.1,
        training_mode: str = "episodic",
        k: int = 16,
        random_state: int = 0,
    ):
        self.n_prompts = n_prompts
        self.num_heads = num_heads
        self.generator_blocks = generator_blocks
        self.guidance_blocks = guidance_blocks
        self.epochs = epochs
        self.base_lr = base_lr
        self.n_support = n_support
        self.n_query = n_query
        self.lambda_corr = lambda_corr
        self.gamma_dac = gamma_dac
        self.tau = tau
        self.training_mode = training_mode
        self.k = k
        self.random_state = random_state

    def _configs(self, d: int, num_outputs: int):
        mcfg = M.ModelConfig(
            d=d,
            Z=self.n_prompts,
            num_heads=self.num_heads,
            generator_blocks=self.generator_blocks,
            guidance_blocks=self.guidance_blocks,
            num_classes=num_outputs,
            task=self._task,
        )
        mcfg.validate()
        tcfg = TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            n_support=self.n_support,
            n_query=self.n_query,
            weights=LossWeights(self.lambda_corr, self.gamma_dac, self.tau),
            training_mode=self.training_mode,
            seed=self.random_state,
        )
        tcfg.validate()
        return mcfg, tcfg

    def _fit(self, X, targets, domains, num_outputs: int):
        d = X.shape[2]
        mcfg, tcfg = self._configs(d, num_outputs)
        ds = EmbeddingDataset(X, domains, targets, self._task, num_outputs if self._task == "classification" else 0)
        self.params_, self.train_log_ = train([ds.domain(dom) for dom in ds.domains], tcfg, mcfg)
        self.n_features_in_ = d
        self.n_tokens_ = X.shape[1]
        return self

    def _raw(self, X, domains) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_tokens(X, self.n_features_in_, self.n_tokens_)
        domains = check_domains(domains, len(X))
        out = None
        for dom in np.unique(domains):
            idx = np.flatnonzero(domains == dom)
            prompt = adapt(self.params_, X[idx], self.k)
            raw = predict_with_prompt(self.params_, prompt.P, X[idx])
            if out is None:
                out = np.empty((len(X),) + raw.shape[1:])
            out[idx] = raw
        return out

    def domain_prompt(self, X) -> np.ndarray:
        """The ``(Z, d)`` prompt adapted from the first ``k`` rows of ``X``."""
        check_is_fitted(self, "params_")
        X = check_tokens(X, self.n_features_in_, self.n_tokens_)
        return adapt(self.params_, X, self.k).P

    def transform(self, X, domains=None) -> np.ndarray:
        """Per-record flattened domain prompts, one shared prompt per domain."""
        check_is_fitted(self, "params_")
        X = check_tokens(X, self.n_features_in_, self.n_tokens_)
        domains = check_domains(domains, len(X))
        out = np.empty((len(X), self.n_prompts * self.n_features_in_))
        for dom in np.unique(domains):
            idx = np.flatnonzero(domains == dom)
            out[idx] = adapt(self.params_, X[idx], self.k).P.ravel()
        return out


class DomainPromptClassifier(ClassifierMixin, _PromptedEstimator):
    """Few-shot test-time adaptive classifier over frozen token embeddings."""

    def fit(self, X, y, domains=None):
        X = check_tokens(X)
        y = check_labels(y, len(X), "classification")
        domains = check_domains(domains, len(X))
        self.encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return self._fit(X, self.encoder_.transform(y), domains, len(self.classes_))

    def predict_proba(self, X, domains=None) -> np.ndarray:
        return softmax(self._raw(X, domains), axis=-1).data

    def predict(self, X, domains=None) -> np.ndarray:
        raw = self._raw(X, domains)
        return self.classes_[raw.argmax(axis=-1)]

    def score(self, X, y, domains=None, sample_weight=None) -> float:
        pred = self.predict(X, domains)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))


class DomainPromptRegressor(RegressorMixin, _PromptedEstimator):
    """Regression counterpart; the head emits one value per record."""

    _task = "regression"

    def fit(self, X, y, domains=None):
        X = check_tokens(X)
        y = check_labels(y, len(X), "regression")
        domains = check_domains(domains, len(X))
        return self._fit(X, y, domains, 1)

    def predict(self, X, domains=None) -> np.ndarray:
        return self._raw(X, domains)

    def score(self, X, y, domains=None, sample_weight=None) -> float:
        return float(r2_score(y, self.predict(X, domains), sample_weight=sample_weight))
