"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_tokens(X, d: int | None = None, l: int | None = None) -> np.ndarray:
    """Return ``X`` as a finite float64 ``(n, l, d)`` array."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected token embeddings of shape (n, l, d), got {X.shape}")
    if d is not None and X.shape[2] != d:
        raise ValueError(f"embedding width {X.shape[2]} does not match the fitted width {d}")
    if l is not None and X.shape[1] != l:
        raise ValueError(f"token count {X.shape[1]} does not match the fitted count {l}")
    return X


def check_domains(domains, n: int) -> np.ndarray:
    if domains is None:
        return np.zeros(n, dtype=np.int64)
    domains = np.asarray(domains)
    if domains.shape != (n,):
        raise ValueError(f"domains must have shape ({n},), got {domains.shape}")
    if not np.issubdtype(domains.dtype, np.integer):
        if not np.all(np.mod(domains, 1) == 0):
            raise ValueError("domain ids must be integers")
    return domains.astype(np.int64)


def check_labels(y, n: int, task: str) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    if task == "regression":
        y = y.astype(np.float64)
        if not np.all(np.isfinite(y)):
            raise ValueError("regression targets must be finite")
    return y
