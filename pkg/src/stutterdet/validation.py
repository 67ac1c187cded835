"""Input checks shared by the estimator and the training loop."""

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .data import N_CLASSES


def check_features(X, n_mfcc=None, min_frames=None):
    """Validate a (N, T, D) feature batch and return it as float32."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False,
                    ensure_min_samples=1)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected (n_samples, n_frames, n_features), got shape {X.shape}")
    if n_mfcc is not None and X.shape[2] != n_mfcc:
        raise ValueError(f"expected {n_mfcc} features per frame, got {X.shape[2]}")
    if min_frames is not None and X.shape[1] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {X.shape[1]}")
    return X


def check_labels(y, n_samples=None, n_classes=N_CLASSES):
    y = column_or_1d(y).astype(np.int64)
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} labels for {n_samples} samples")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return y
