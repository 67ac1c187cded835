"""scikit-learn compatible wrapper around the training loop."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import LABEL_NAMES, N_CLASSES
from .train import ArrayData, TrainConfig, build_model, fit_model, predict_labels, predict_scores
from .validation import check_features, check_labels


class StutterClassifier(ClassifierMixin, BaseEstimator):
    """Five-way stutter classifier over MFCC sequences.

    ``X`` is an (n_samples, n_frames, n_mfcc) array, e.g. the output of
    :class:`stutterdet.audio.MFCCTransformer`; ``y`` holds integer labels
    in :class:`stutterdet.data.Label` order. When no validation set is given
    to ``fit``, a ``validation_fraction`` of the samples is held out for
    early stopping.

    ``predict`` applies the fluent-gate rule for branched variants;
    ``predict_proba`` returns the 5-way head's distribution.
    """

    def __init__(self, variant="mc", loss="ce", lr=1e-2, batch_size=128, max_epochs=50,
                 patience=7, dropout=0.3, bilstm_hidden=64, fc_hidden=64,
                 validation_fraction=0.1, random_state=0):
        self.variant = variant
        self.loss = loss
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.bilstm_hidden = bilstm_hidden
        self.fc_hidden = fc_hidden
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self, n_mfcc):
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, seed=int(self.random_state or 0), variant=self.variant,
            loss_mode=self.loss, n_mfcc=n_mfcc, bilstm_hidden=self.bilstm_hidden,
            fc_hidden=self.fc_hidden, dropout=self.dropout,
        )

    def fit(self, X, y, X_valid=None, y_valid=None):
        X = check_features(X)
        y = check_labels(y, X.shape[0])
        cfg = self._config(X.shape[2])
        if X_valid is None:
            rng = np.random.default_rng(cfg.seed)
            perm = rng.permutation(X.shape[0])
            n_valid = max(1, int(round(self.validation_fraction * X.shape[0])))
            if n_valid >= X.shape[0]:
                raise ValueError("not enough samples to hold out a validation set")
            valid_idx, train_idx = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])
            X_valid, y_valid = X[valid_idx], y[valid_idx]
            X, y = X[train_idx], y[train_idx]
        else:
            X_valid = check_features(X_valid, n_mfcc=X.shape[2])
            y_valid = check_labels(y_valid, X_valid.shape[0])
        model = build_model(cfg)
        for name, arr in (("training", X), ("validation", X_valid)):
            if arr.shape[1] < model.spec.min_frames:
                raise ValueError(
                    f"{name} clips have {arr.shape[1]} frames; the encoder needs "
                    f"{model.spec.min_frames}"
                )
        train = ArrayData(torch.from_numpy(X), torch.from_numpy(y))
        valid = ArrayData(torch.from_numpy(X_valid), torch.from_numpy(y_valid))
        result = fit_model(model, train, valid, cfg)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.training_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(N_CLASSES)
        self.class_names_ = list(LABEL_NAMES)
        self.n_features_in_ = X.shape[2]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        return torch.from_numpy(check_features(X, n_mfcc=self.n_features_in_,
                                               min_frames=self.model_.spec.min_frames))

    def predict(self, X):
        X = self._check_X(X)
        return predict_labels(self.model_, X)

    def predict_proba(self, X):
        X = self._check_X(X)
        return predict_scores(self.model_, X)["disfluent"]

    def predict_heads(self, X):
        """Per-head probability arrays keyed by ``fluent`` / ``disfluent``."""
        X = self._check_X(X)
        return predict_scores(self.model_, X)
