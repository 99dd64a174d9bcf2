"""scikit-learn compatible wrappers around the learners and meta-learners, so
they drop into pipelines, ``clone`` and model-selection utilities.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .dataset import EnvironmentDataset
from .learners import LearnerConfig, hyper_search, predict, train_linear, train_net
from .meta import MetaTrainConfig, fine_tune, maml_train_parallel, train_sequentially
from .sequence import select_environments


def as_environments(meta_environments, n_features=None) -> list:
    """Normalize ``{env_id: (X, y)}`` or a sequence of datasets to a list of datasets."""
    if isinstance(meta_environments, Mapping):
        envs = [EnvironmentDataset(str(k), str(k), X, y) for k, (X, y) in meta_environments.items()]
    else:
        envs = list(meta_environments)
    if not envs:
        raise ValueError("at least one meta environment is required")
    for e in envs:
        if not isinstance(e, EnvironmentDataset):
            raise TypeError("meta environments must be EnvironmentDataset instances or (X, y) pairs")
        if n_features is not None and e.X.shape[1] != n_features:
            raise ValueError(f"meta environment {e.env_id!r} has {e.X.shape[1]} options, "
                             f"expected {n_features}")
    return envs


class LinearSurrogateRegressor(RegressorMixin, BaseEstimator):
    """Ordinary least squares with intercept and a minimal jitter for singular systems."""

    def fit(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=True)
        self.model_ = train_linear(X, y)
        self.coef_ = np.array(self.model_.params.groups[0])
        self.intercept_ = float(self.model_.params.groups[1])
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False)
        return predict(self.model_, X)


class _NetParams:
    def _config(self, seed=None) -> LearnerConfig:
        return LearnerConfig(
            hidden=tuple(self.hidden_layer_sizes), learning_rate=self.learning_rate,
            l1=self.l1, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.random_state if seed is None else seed,
            grid_learning_rate=self.grid_learning_rate, grid_l1=self.grid_l1)

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False)
        return predict(self.model_, X)


class L1MLPRegressor(_NetParams, RegressorMixin, BaseEstimator):
    """ReLU network with an L1 weight penalty, trained by plain gradient descent.

    ``init_params`` warm-starts training from a compatible ParameterVector;
    ``search=True`` picks learning rate and l1 from the grid first.
    """

    def __init__(self, hidden_layer_sizes=(16, 16), learning_rate=0.1, l1=0.001, epochs=200,
                 batch_size=256, random_state=0, init_params=None, search=False,
                 grid_learning_rate=(0.01, 0.001), grid_l1=(0.01, 0.1, 1.0)):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.l1 = l1
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.init_params = init_params
        self.search = search
        self.grid_learning_rate = grid_learning_rate
        self.grid_l1 = grid_l1

    def fit(self, X, y):
        X, y = validate_data(self, X, y, y_numeric=True)
        cfg = self._config()
        if self.search:
            cfg = hyper_search(X, y, cfg, self.init_params)
        self.model_ = train_net(X, y, cfg, self.init_params)
        self.params_ = self.model_.params
        self.loss_ = self.model_.metadata["final_loss"]
        return self


class SeMPLRegressor(_NetParams, RegressorMixin, BaseEstimator):
    """Sequential meta-learning regressor.

    ``pretrain`` ranks the meta environments with a linear surrogate and trains
    on them one at a time, most useful last; ``fit`` then fine-tunes on the
    target samples. Without pre-training, ``fit`` trains from scratch.

    >>> est = SeMPLRegressor(epochs=50)                      # doctest: +SKIP
    >>> est.fit(X_target, y_target, meta_environments=envs)  # doctest: +SKIP
    """

    def __init__(self, hidden_layer_sizes=(16, 16), learning_rate=0.1, l1=0.001, epochs=200,
                 pretrain_epochs=500, outer_iterations=1, selection_repeats=30, batch_size=256,
                 random_state=0, search=False, grid_learning_rate=(0.01, 0.001),
                 grid_l1=(0.01, 0.1, 1.0)):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.l1 = l1
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.outer_iterations = outer_iterations
        self.selection_repeats = selection_repeats
        self.batch_size = batch_size
        self.random_state = random_state
        self.search = search
        self.grid_learning_rate = grid_learning_rate
        self.grid_l1 = grid_l1

    def _meta_config(self):
        return MetaTrainConfig(replace(self._config(), epochs=self.pretrain_epochs),
                               self.outer_iterations, self.random_state)

    def pretrain(self, meta_environments):
        envs = as_environments(meta_environments)
        self.plan_ = select_environments(envs, None, self.selection_repeats, self.random_state)
        by_id = {e.env_id: e for e in envs}
        self.meta_model_ = train_sequentially([by_id[i] for i in self.plan_.order],
                                              self._meta_config(), self.plan_)
        return self

    def fit(self, X, y, meta_environments=None):
        X, y = validate_data(self, X, y, y_numeric=True)
        if meta_environments is not None:
            self.pretrain(as_environments(meta_environments, X.shape[1]))
        meta = getattr(self, "meta_model_", None)
        if meta is not None and meta.params.architecture["n_features"] != X.shape[1]:
            raise ValueError("pre-trained meta-model expects "
                             f"{meta.params.architecture['n_features']} options, got {X.shape[1]}")
        cfg = self._config()
        if meta is None:
            if self.search:
                cfg = hyper_search(X, y, cfg)
            self.model_ = train_net(X, y, cfg)
        else:
            self.model_ = fine_tune(meta, X, y, cfg, search=self.search)
        return self


class ParallelMetaRegressor(SeMPLRegressor):
    """First-order MAML-style baseline: adapt to every meta environment from a
    shared start, average the adapted parameters, then fine-tune."""

    def pretrain(self, meta_environments):
        envs = as_environments(meta_environments)
        data = {e.env_id: e for e in envs}
        self.meta_model_ = maml_train_parallel(None, list(data), self._meta_config(), data=data)
        self.plan_ = self.meta_model_.plan
        return self
