"""Scikit-learn compatible wrapper around the noise-injected classifiers.

Lets the defended models drop into sklearn pipelines and model selection:
``fit(X, y)`` / ``predict(X)`` / ``predict_proba(X)`` with ``get_params`` /
``set_params`` semantics.  X may be flat [n, features] (reshaped to the
declared input shape) or already [n, c, h, w].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .models import build_model
from .rng import derive_rng
from .training import TrainConfig, train


# mixin-first base order matters: BaseEstimator.__sklearn_tags__ does not
# chain to super(), so ClassifierMixin must precede it for the classifier tag
# to apply (and for model selection to stratify splits).
class NoiseInjectedClassifier(ClassifierMixin, BaseEstimator):
    """A small MLP/CNN classifier with optional parametric noise injection.

    Parameters mirror the package's training configuration; predictions on a
    stochastic model use one seeded stochastic forward per call.
    """

    def __init__(self, arch="mlp", pni="none", granularity="layerwise",
                 input_shape=None, epochs=20, batch_size=64, learning_rate=0.05,
                 adversarial=False, train_epsilon=0.0, warmup_epochs=5, seed=0):
        self.arch = arch
        self.pni = pni
        self.granularity = granularity
        self.input_shape = input_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adversarial = adversarial
        self.train_epsilon = train_epsilon
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def _reshape(self, X):
        X = np.asarray(X, dtype=np.float32)
        shape = self.input_shape_
        if X.ndim == 2:
            return X.reshape((len(X),) + shape)
        if X.ndim == len(shape) + 1 and tuple(X.shape[1:]) == shape:
            return X
        raise ValueError(f"X shape {X.shape} does not match input shape {shape}")

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        if X.ndim < 2 or len(X) != len(y):
            raise ValueError("X must be [n, ...] with matching y")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("inputs must lie in [0,1]")
        self.classes_ = np.unique(y)
        y_idx = np.searchsorted(self.classes_, y)
        if self.input_shape is not None:
            self.input_shape_ = tuple(self.input_shape)
        elif X.ndim == 4:
            self.input_shape_ = tuple(X.shape[1:])
        else:
            self.input_shape_ = (int(np.prod(X.shape[1:])),) if self.arch == "mlp" \
                else None
        if self.input_shape_ is None:
            raise ValueError("cnn needs input_shape or [n,c,h,w] input")
        Xr = self._reshape(X)
        pni = {"w": "pni-w", "a-a": "pni-a-a"}.get(self.pni, self.pni)
        self.model_ = build_model(self.arch, pni, self.granularity,
                                  input_shape=self.input_shape_,
                                  classes=len(self.classes_),
                                  init_seed=self.seed)
        ds = Dataset(Xr, y_idx.astype(np.int64), Xr[:1], y_idx[:1].astype(np.int64),
                     class_count=len(self.classes_))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate,
                          adversarial=self.adversarial,
                          train_epsilon=self.train_epsilon,
                          warmup_epochs=self.warmup_epochs, seed=self.seed)
        self.train_log_ = train(self.model_, ds, cfg)
        self.n_predict_calls_ = 0
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def decision_function(self, X):
        self._check_fitted()
        Xr = self._reshape(np.asarray(X, dtype=np.float32))
        rng = None
        if self.model_.is_stochastic:
            self.n_predict_calls_ += 1
            rng = derive_rng(self.seed, "predict", self.n_predict_calls_)
        return self.model_.logits(Xr, rng=rng)

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]
