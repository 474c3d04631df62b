"""scikit-learn style wrappers around the two forecasters and the baseline.

They take plain ``(X, y)`` arrays (rows are dataset entries) so they plug into
``sklearn`` tooling such as ``clone``, ``cross_val_score`` or grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .models import FCNet, FCNetConfig, FCSubnetConfig, ForecasterConfig, GRUForecaster, GRUSubnetConfig
from .training import TrainConfig, predict_batch, train


class _NetRegressor(RegressorMixin, BaseEstimator):
    def _build(self, n_features, n_outputs):
        raise NotImplementedError

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            lr=self.learning_rate,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        net = self._build(X.shape[1], y.shape[1])
        self.checkpoint_, self.report_ = train(net, (X, y), self._train_config())
        self.net_ = self.checkpoint_.network
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        y = predict_batch(self.net_, X)
        return y[:, 0] if self.n_outputs_ == 1 else y

    @property
    def loss_curve_(self):
        check_is_fitted(self, "report_")
        return list(self.report_.epoch_losses)


class FCStageRegressor(_NetRegressor):
    """Fully-connected baseline. Input width comes from ``X`` at fit time."""

    def __init__(self, hidden=(350, 500, 350), epochs=20, batch_size=64, learning_rate=1e-3, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _build(self, n_features, n_outputs):
        return FCNet(FCNetConfig((n_features, *self.hidden, n_outputs)))


class GRUStageRegressor(_NetRegressor):
    """Composite GRU forecaster.

    ``X`` holds ``n_upstream + 1`` blocks of ``seq_len`` stages followed by the
    precipitation vector, whose length is whatever columns remain.
    """

    def __init__(
        self,
        n_upstream=4,
        seq_len=24,
        embed=400,
        hidden=400,
        gru_out=10,
        precip_hidden=(100, 200, 100),
        precip_out=30,
        head_hidden=(200,),
        epochs=20,
        batch_size=64,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.n_upstream = n_upstream
        self.seq_len = seq_len
        self.embed = embed
        self.hidden = hidden
        self.gru_out = gru_out
        self.precip_hidden = precip_hidden
        self.precip_out = precip_out
        self.head_hidden = head_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _build(self, n_features, n_outputs):
        n_precip = n_features - (self.n_upstream + 1) * self.seq_len
        if n_precip < 1:
            raise ValueError(
                f"{n_features} features leave no precipitation block after "
                f"{self.n_upstream + 1} histories of {self.seq_len}"
            )
        cfg = ForecasterConfig(
            n_upstream=self.n_upstream,
            gru=GRUSubnetConfig(self.seq_len, self.embed, self.hidden, self.gru_out),
            fc=FCSubnetConfig((n_precip, *self.precip_hidden, self.precip_out)),
            head_hidden=tuple(self.head_hidden),
            output=n_outputs,
        )
        return GRUForecaster(cfg)


class PersistenceRegressor(RegressorMixin, BaseEstimator):
    """Repeats the most recent own-sensor stage, column ``height_len - 1``."""

    def __init__(self, height_len=120):
        self.height_len = height_len

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if not 0 < self.height_len <= X.shape[1]:
            raise ValueError(f"height_len {self.height_len} outside 1..{X.shape[1]}")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = 1 if y.ndim == 1 else y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_outputs_")
        X = check_array(X, dtype=np.float64)
        last = X[:, self.height_len - 1]
        if self.n_outputs_ == 1:
            return last.copy()
        return np.repeat(last[:, None], self.n_outputs_, axis=1)
