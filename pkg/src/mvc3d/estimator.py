"""scikit-learn style wrapper around the MV-C3D model and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, build, extract_features
from .training import RingWindow, TrainConfig, train
from .validation import check_cube_array, check_labels


class MVC3DClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-view 3D CNN classifier.

    ``X`` is ``[B, 3, N, H, W]``. When ``n_views`` is smaller than the view
    axis of ``X`` the inputs are treated as full view rings: training cuts
    an ``n_views`` arc from each (random start with ``random_start``) and
    prediction uses the arc starting at view 0. ``transform`` returns the
    L2-normalised Fc2 activations used for retrieval.
    """

    def __init__(
        self,
        n_views=None,
        viewpoint_schedule="fixed-3",
        channels=(64, 128, 256, 256, 512, 512, 512, 512),
        fc_dims=(4096, 4096),
        conv_pattern="joint3d",
        dropout_rate=0.5,
        init_std=0.05,
        initial_lr=1e-4,
        lr_decay_every=20,
        lam=5e-4,
        batch_size=8,
        max_epochs=60,
        early_stop_threshold=1e-3,
        oversample_target=None,
        random_start=False,
        random_state=0,
    ):
        self.n_views = n_views
        self.viewpoint_schedule = viewpoint_schedule
        self.channels = channels
        self.fc_dims = fc_dims
        self.conv_pattern = conv_pattern
        self.dropout_rate = dropout_rate
        self.init_std = init_std
        self.initial_lr = initial_lr
        self.lr_decay_every = lr_decay_every
        self.lam = lam
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_threshold = early_stop_threshold
        self.oversample_target = oversample_target
        self.random_start = random_start
        self.random_state = random_state

    def _model_config(self, n_views: int, image_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            n_views=n_views,
            n_classes=n_classes,
            viewpoint_schedule=self.viewpoint_schedule,
            channels=tuple(self.channels),
            fc_dims=tuple(self.fc_dims),
            conv_pattern=self.conv_pattern,
            dropout_rate=self.dropout_rate,
            seed=self.random_state,
            image_size=image_size,
            init_std=self.init_std,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.initial_lr,
            lr_decay_every=self.lr_decay_every,
            lam=self.lam,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            early_stop_threshold=self.early_stop_threshold,
            oversample_target=self.oversample_target,
            seed=self.random_state,
            random_start=self.random_start,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_cube_array(X)
        y = check_labels(y, len(X))
        if X.shape[3] != X.shape[4]:
            raise ValueError(f"images must be square, got {X.shape[3]}x{X.shape[4]}")
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        ring = X.shape[2]
        n = ring if self.n_views is None else int(self.n_views)
        if n > ring:
            raise ValueError(f"n_views={n} exceeds the {ring} views in X")
        self.n_views_ = n
        self.ring_views_ = ring
        self.model_ = build(self._model_config(n, X.shape[3], len(self.classes_)))
        window = RingWindow(n) if n < ring else None
        val = None
        if X_val is not None:
            # validation cubes go through the same window as the training cubes
            Xv = check_cube_array(X_val, n_views=ring, image_size=X.shape[3], name="X_val")
            yv = check_labels(y_val, len(Xv))
            if not np.isin(yv, self.classes_).all():
                raise ValueError("y_val contains labels not seen in y")
            val = (list(Xv), np.searchsorted(self.classes_, yv).tolist())
        self.result_ = train(self.model_, list(X), y_idx.tolist(), self.train_config(), val=val, window=window)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _cut(self, X: np.ndarray) -> np.ndarray:
        if X.shape[2] == getattr(self, "n_views_", X.shape[2]):
            return X
        if X.shape[2] < self.n_views_:
            raise ValueError(f"X has N={X.shape[2]} views, model expects {self.n_views_}")
        w = RingWindow(self.n_views_)
        return np.stack([w.cut(c) for c in X])

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = self._cut(check_cube_array(X))
        return check_cube_array(X, self.n_views_, self.model_.config.image_size)

    def decision_function(self, X) -> np.ndarray:
        X = self._prepare(X)
        bs = self.batch_size
        return np.concatenate([self.model_.forward(X[i : i + bs]).data for i in range(0, len(X), bs)])

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X) -> np.ndarray:
        X = self._prepare(X)
        bs = self.batch_size
        return np.concatenate([extract_features(self.model_, X[i : i + bs]).data for i in range(0, len(X), bs)])
