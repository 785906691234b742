"""scikit-learn style classifier over categorical features.

Each row of ``X`` holds non-negative integer codes; multiple columns are
combined into one joint feature value, so the model is exact but the domain
size is the product of the column cardinalities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .exceptions import DivergenceError
from .lexyf import ModelSpec, NaturalParams, conditional_table
from .optimizers import ALGORITHMS, Schedule, _Runner


class DSNGDClassifier(ClassifierMixin, BaseEstimator):
    """Online classifier trained by DSNGD, SGD or the exact natural gradient.

    Parameters
    ----------
    algorithm : {"dsngd", "sgd", "sngd"}
    class_stat : {"minimal", "onehot"}
    schedule, c, t0 : step sizes, as in :class:`dsngd.optimizers.Schedule`
    kappa : prior weight of the dual estimate
    n_passes : passes over the data in :meth:`fit`
    cardinalities : number of values per column; inferred from the data if None
    shuffle, random_state : sample order within each pass
    """

    def __init__(self, algorithm="dsngd", class_stat="minimal", schedule="inverse-t", c=1.0, t0=10.0,
                 kappa=1.0, n_passes=1, cardinalities=None, shuffle=True, random_state=None):
        self.algorithm = algorithm
        self.class_stat = class_stat
        self.schedule = schedule
        self.c = c
        self.t0 = t0
        self.kappa = kappa
        self.n_passes = n_passes
        self.cardinalities = cardinalities
        self.shuffle = shuffle
        self.random_state = random_state

    def _encode_X(self, X):
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != len(self.cardinalities_):
            raise ValueError(f"X has {X.shape[1]} columns, expected {len(self.cardinalities_)}")
        if np.any(X < 0) or np.any(X >= self.cardinalities_):
            raise ValueError("feature codes outside [0, cardinality)")
        return np.ravel_multi_index(tuple(X.T), self.cardinalities_).astype(np.int64)

    def _setup(self, X, y, classes=None):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.n_passes < 1:
            raise ValueError("n_passes must be >= 1")
        self._label_encoder = LabelEncoder().fit(y if classes is None else classes)
        self.classes_ = self._label_encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if self.cardinalities is None:
            card = np.maximum(X.max(axis=0) + 1, 2)
        else:
            card = np.asarray(self.cardinalities, dtype=np.int64)
        self.cardinalities_ = tuple(int(v) for v in card)
        self.n_features_in_ = X.shape[1]
        self.spec_ = ModelSpec(len(self.classes_), int(np.prod(card)), self.class_stat)
        self.schedule_ = Schedule(self.schedule, self.c, self.t0)
        self._runner = _Runner(self.spec_, self.algorithm, self.kappa)
        self.t_ = 0

    def _consume(self, xs, ys):
        gammas = self.schedule_.values(self.t_, len(xs))
        done, bad = self._runner.chunk(xs, ys, gammas)
        self.t_ += done
        if bad:
            raise DivergenceError(f"{self.algorithm} diverged at step {self.t_}", step=self.t_)
        self.coef_ = self._runner.eta

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.int64)
        self._setup(X, y)
        xs, ys = self._encode_X(X), self._label_encoder.transform(y).astype(np.int64)
        rng = check_random_state(self.random_state)
        for _ in range(self.n_passes):
            order = rng.permutation(len(xs)) if self.shuffle else np.arange(len(xs))
            self._consume(xs[order], ys[order])
        return self

    def partial_fit(self, X, y, classes=None):
        """One pass over ``(X, y)`` in the given order; ``classes`` is required on the first call."""
        X, y = check_X_y(X, y, dtype=np.int64)
        if not hasattr(self, "spec_"):
            if classes is None or self.cardinalities is None:
                raise ValueError("the first partial_fit call needs classes, and cardinalities must be set")
            self._setup(X, y, classes)
        unseen = np.setdiff1d(np.unique(y), self.classes_)
        if unseen.size:
            raise ValueError(f"labels {unseen} were not declared in classes")
        self._consume(self._encode_X(X), self._label_encoder.transform(y).astype(np.int64))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        xs = self._encode_X(X)
        eta = NaturalParams.from_stacked(self.spec_, self.coef_)
        return conditional_table(self.spec_, eta)[xs]

    def predict_log_proba(self, X):
        return np.log(self.predict_proba(X))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
