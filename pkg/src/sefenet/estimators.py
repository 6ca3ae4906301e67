"""Scikit-learn style wrappers around the filtering, scaling and decoding code.

Inputs are 3-D arrays shaped ``(trials, channels, samples)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import EpochSet, split_train_val, derive_seed
from .decoders import ArchitectureConfig, build
from .nn import init_params
from .signal import (
    FilterSpec,
    SignalBlock,
    apply_causal,
    apply_zero_phase,
    channel_stats,
    design_butterworth_bandpass,
)
from .training import TrainConfig, predict_logits, train

__all__ = ["BandpassFilter", "Decimator", "ChannelStandardizer", "SefeNetClassifier"]


def _check_epochs(X, dtype=np.float64):
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False)
    if X.ndim != 3:
        raise ValueError(f"expected trials x channels x samples, got shape {X.shape}")
    return X


class BandpassFilter(TransformerMixin, BaseEstimator):
    """Butterworth band-pass applied along the last axis of every trial."""

    def __init__(self, fs_hz=500.0, low_hz=0.5, high_hz=50.0, order=5, zero_phase=True):
        self.fs_hz = fs_hz
        self.low_hz = low_hz
        self.high_hz = high_hz
        self.order = order
        self.zero_phase = zero_phase

    def fit(self, X, y=None):
        X = _check_epochs(X)
        self.cascade_ = design_butterworth_bandpass(
            FilterSpec("band-pass", self.order, self.low_hz, self.high_hz, self.fs_hz))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "cascade_")
        X = _check_epochs(X)
        apply = apply_zero_phase if self.zero_phase else apply_causal
        # filter all trials in one block: channels are independent rows
        n, c, t = X.shape
        block = SignalBlock(X.reshape(n * c, t), self.fs_hz, [str(i) for i in range(n * c)])
        return apply(self.cascade_, block).data.reshape(n, c, t)


class Decimator(TransformerMixin, BaseEstimator):
    """Keep every ``factor``-th sample, starting at sample 0."""

    def __init__(self, factor=2):
        self.factor = factor

    def fit(self, X, y=None):
        if int(self.factor) != self.factor or self.factor < 1:
            raise ValueError(f"factor must be a positive integer, got {self.factor!r}")
        self.n_features_in_ = _check_epochs(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return _check_epochs(X)[:, :, ::int(self.factor)]


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel z-scoring with statistics pooled over training trials and time."""

    def fit(self, X, y=None):
        X = _check_epochs(X)
        self.mean_, self.scale_ = channel_stats(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, ("mean_", "scale_"))
        X = _check_epochs(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"fitted on {self.n_features_in_} channels, got {X.shape[1]}")
        return (X - self.mean_[:, None]) / self.scale_[:, None]


class SefeNetClassifier(ClassifierMixin, BaseEstimator):
    """CNN decoder (DeepConvNet, ShallowConvNet or EEGNet), optionally with SEFE.

    ``fit`` holds out ``1 - train_ratio`` of each subject's trials (stratified
    by class) for best-epoch selection. Pass ``groups`` with subject tags to
    split per subject; otherwise all trials count as one subject.
    """

    def __init__(self, backbone="eegnet", with_sefe=True, hparams=None, learning_rate=1e-3,
                 batch_size=32, max_epochs=200, early_stop_patience=20, train_ratio=0.8,
                 dtype="float32", random_state=0):
        self.backbone = backbone
        self.with_sefe = with_sefe
        self.hparams = hparams
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.train_ratio = train_ratio
        self.dtype = dtype
        self.random_state = random_state

    def _train_config(self, seed):
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, early_stop_patience=self.early_stop_patience,
                           seed=seed, train_ratio=self.train_ratio, dtype=self.dtype)

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"expected trials x channels x samples, got shape {X.shape}")
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        groups = np.full(len(y), "S", dtype=object) if groups is None else np.asarray(groups, dtype=object)
        if groups.shape != y.shape:
            raise ValueError(f"groups has shape {groups.shape}, expected {y.shape}")
        seed = 0 if self.random_state is None else int(self.random_state)

        full = EpochSet(X, y_idx, groups.astype(str).astype(object), fs_hz=1.0)
        trains, vals = [], []
        for j, subject in enumerate(full.subjects):
            tr, va = split_train_val(full.take(np.flatnonzero(full.subject_ids == subject)),
                                     self.train_ratio, derive_seed(seed, j))
            trains.append(tr)
            vals.append(va)

        self.arch_ = ArchitectureConfig(self.backbone, X.shape[1], X.shape[2], len(self.classes_),
                                        self.with_sefe, dict(self.hparams or {}))
        self.stack_ = build(self.arch_)
        params = init_params(self.stack_, derive_seed(seed, 1_000_003))
        self.params_, self.history_, self.best_epoch_ = train(
            self.stack_, params, EpochSet.concatenate(trains), EpochSet.concatenate(vals),
            self._train_config(seed))
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = _check_epochs(X)
        if X.shape[1:] != (self.arch_.n_channels, self.arch_.n_samples):
            raise ValueError(f"fitted on {self.arch_.n_channels} x {self.arch_.n_samples} epochs, "
                             f"got {X.shape[1]} x {X.shape[2]}")
        return predict_logits(self.stack_, self.params_, X.astype(self.dtype)[:, None])

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
