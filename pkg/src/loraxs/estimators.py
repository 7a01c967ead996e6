"""scikit-learn compatible wrappers.

``RandomizedTruncatedSVD`` is a transformer over the package's randomized
SVD; ``LoraXsRegressor`` fits the latent matrix of a LoRA-XS adapter on top
of a frozen linear map, so it drops into pipelines, ``clone`` and
cross-validation like any other regressor. Inputs follow the scikit-learn
convention of one sample per row.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import as_matrix
from .adapter import DEFAULT_ALPHA, DEFAULT_SIGMA, init_loraxs_random, init_loraxs_svd, merge
from .exceptions import ParameterError, ShapeError
from .linalg import DEFAULT_N_ITER, truncated_svd
from .training import Dataset, Layer, LinearStack, TrainConfig, train

__all__ = ["RandomizedTruncatedSVD", "LoraXsRegressor"]


class RandomizedTruncatedSVD(TransformerMixin, BaseEstimator):
    """Rank-``n_components`` projection learned with the randomized truncated SVD.

    Parameters
    ----------
    n_components : int
        Number of singular triplets kept.
    n_iter : int
        Subspace iterations of the range finder.
    random_state : int
        Seed of the Gaussian test matrix; fits are bit-reproducible.

    Attributes
    ----------
    components_ : ndarray of shape (n_components, n_features)
        Right singular vectors, one per row.
    singular_values_ : ndarray of shape (n_components,)
    """

    def __init__(self, n_components=2, n_iter=DEFAULT_N_ITER, random_state=0):
        self.n_components = n_components
        self.n_iter = n_iter
        self.random_state = random_state

    def _fit(self, X):
        X = check_array(X, dtype=np.float64)
        factors = truncated_svd(X, self.n_components, self.n_iter, self.random_state or 0)
        self.components_ = np.ascontiguousarray(factors.V.T)
        self.singular_values_ = np.array(factors.S)
        self.n_features_in_ = X.shape[1]
        return factors

    def fit(self, X, y=None):
        self._fit(X)
        return self

    def fit_transform(self, X, y=None):
        factors = self._fit(X)
        return factors.U * factors.S

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X @ self.components_.T

    def inverse_transform(self, X):
        check_is_fitted(self, "components_")
        return check_array(X, dtype=np.float64) @ self.components_


class LoraXsRegressor(RegressorMixin, BaseEstimator):
    """Regress ``y ~ (W + s B R A) x`` with ``W``, ``A``, ``B`` frozen and ``R`` learned.

    ``base_weight`` (shape ``(n_outputs, n_features)``) is the pretrained map
    being adapted. ``init='svd'`` builds ``A``/``B`` from its truncated SVD;
    ``init='random'`` uses frozen Kaiming-uniform projections instead.

    Attributes
    ----------
    adapter_ : LoraXsAdapter
    coef_ : ndarray of shape (n_outputs, n_features)
        Merged weight ``W + delta_W``.
    train_run_ : TrainRun
    """

    def __init__(
        self,
        base_weight=None,
        rank=4,
        alpha=DEFAULT_ALPHA,
        sigma=DEFAULT_SIGMA,
        init="svd",
        svd_seed=0,
        learning_rate=1e-2,
        epochs=10,
        batch_size=32,
        warmup_ratio=0.06,
        scheduler="linear",
        weight_decay=0.0,
        random_state=0,
    ):
        self.base_weight = base_weight
        self.rank = rank
        self.alpha = alpha
        self.sigma = sigma
        self.init = init
        self.svd_seed = svd_seed
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_ratio = warmup_ratio
        self.scheduler = scheduler
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _make_adapter(self, w):
        seed = self.random_state or 0
        if self.init == "svd":
            return init_loraxs_svd(w, self.rank, self.alpha, self.sigma, svd_seed=self.svd_seed, r_seed=seed)
        if self.init == "random":
            return init_loraxs_random(w.shape[0], w.shape[1], self.rank, self.alpha, self.sigma, seed=seed)
        raise ParameterError(f"init must be 'svd' or 'random', got {self.init!r}")

    def fit(self, X, y):
        if self.base_weight is None:
            raise ParameterError("LoraXsRegressor needs a base_weight to adapt")
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        w = as_matrix(self.base_weight, "base_weight")
        y2 = y.reshape(-1, 1) if y.ndim == 1 else y
        if w.shape != (y2.shape[1], X.shape[1]):
            raise ShapeError(f"base_weight is {w.shape}, data needs {(y2.shape[1], X.shape[1])}")
        self._y_1d = y.ndim == 1
        adapter = self._make_adapter(w)
        model = LinearStack([Layer(w, adapter)])
        config = TrainConfig(
            adapter_lr=self.learning_rate,
            epochs=self.epochs,
            batch_size=min(self.batch_size, X.shape[0]),
            warmup_ratio=self.warmup_ratio,
            scheduler=self.scheduler,
            weight_decay=self.weight_decay,
            seed=self.random_state or 0,
        )
        self.train_run_ = train(model, Dataset(X.T, y2.T), config)
        self.adapter_ = adapter
        self.coef_ = merge(w, adapter)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        pred = X @ self.coef_.T
        return pred.ravel() if self._y_1d else pred
