"""scikit-learn style wrapper: ``fit`` on feature maps, ``transform`` to matching embeddings."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbone import BackboneConfig
from .branch import BranchConfig
from .data_io import Split
from .errors import ConfigError
from .losses import LossWeights
from .model import VARIANTS, ModelConfig
from .training import LrSchedule, SamplerConfig, TrainSettings, train


class MHSANet(TransformerMixin, BaseEstimator):
    """Attention-branch re-identification model over ``(n, Hf, Wf, C)`` feature maps.

    ``fit`` trains end to end on labelled maps; ``transform`` returns the
    embedding selected by ``variant`` (``full``, ``local``, ``dagger`` or
    ``global``). Setting ``train_gfb_ce=False`` trains the dagger model.
    """

    def __init__(self, K=8, D=32, fusion="saffm", rlm_enabled=True, branch_enabled=True, train_gfb_ce=True,
                 lambda1=1e-4, lambda2=1.0, lambda3=1e-3, gamma=1e-3, margin=3.0, P_ids=8, K_inst=4,
                 epochs=30, base_lr=3e-3, warmup_epochs=3, variant="full", random_state=0):
        self.K = K
        self.D = D
        self.fusion = fusion
        self.rlm_enabled = rlm_enabled
        self.branch_enabled = branch_enabled
        self.train_gfb_ce = train_gfb_ce
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.gamma = gamma
        self.margin = margin
        self.P_ids = P_ids
        self.K_inst = K_inst
        self.epochs = epochs
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.variant = variant
        self.random_state = random_state

    def _validate_maps(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected feature maps of shape (n, Hf, Wf, C), got {X.shape}")
        return X

    def _schedule(self) -> LrSchedule:
        # decay points scale with the epoch budget: 2/3 and 13/15 of training
        e = int(self.epochs)
        decay = ((max(1, 2 * e // 3), self.base_lr / 10), (max(1, 13 * e // 15), self.base_lr / 100))
        return LrSchedule(base_lr=self.base_lr, warmup_epochs=min(self.warmup_epochs, e), decay=decay, epochs=e)

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._validate_maps(X)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        self.label_encoder_ = LabelEncoder().fit(y)
        labels = self.label_encoder_.transform(y).astype(np.int64)
        n, Hf, Wf, C = X.shape
        cfg = ModelConfig(
            backbone=BackboneConfig(Hf=Hf, Wf=Wf, C=C, D=self.D, train_gfb_ce=self.train_gfb_ce),
            branch=BranchConfig(K=self.K, fusion=self.fusion, rlm_enabled=self.rlm_enabled),
            branch_enabled=self.branch_enabled, n_classes=len(self.label_encoder_.classes_))
        settings = TrainSettings(sampler=SamplerConfig(self.P_ids, self.K_inst), schedule=self._schedule(),
                                 loss=LossWeights(self.lambda1, self.lambda2, self.lambda3, self.gamma, self.margin),
                                 seed=self.random_state)
        split = Split(X.reshape(n, Hf * Wf, C), labels, np.zeros(n, dtype=np.int64), np.zeros((n, Hf * Wf), bool))
        result = train(cfg, settings, split)
        self.model_ = result.model
        self.loss_curve_ = np.array([r["total"] for r in result.rows])
        self.map_shape_ = (Hf, Wf, C)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_maps(X)
        if X.shape[1:] != self.map_shape_:
            raise ValueError(f"feature maps have shape {X.shape[1:]}, the model was fitted on {self.map_shape_}")
        n, Hf, Wf, C = X.shape
        variant = self.variant
        if variant == "dagger" and self.train_gfb_ce:
            variant = "full"
        return self.model_.embed(X.reshape(n, Hf * Wf, C), variant)
