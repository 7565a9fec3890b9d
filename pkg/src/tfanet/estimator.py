"""scikit-learn style front end: ``FeatureFuser`` and ``TFANet``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig, FrozenBackbone
from .config import RunSettings, apply_overrides, preset
from .datakit import Dataset, Sample
from .scorer import Scorer
from .tfam import attention_maps, check_variant
from .trainer import Checkpoint, fit, load_checkpoint, save_checkpoint


def check_images(X, channels: int = 3) -> np.ndarray:
    """Validate an ``n x H x W x C`` float image batch (a single image is promoted)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ValueError(f"expected images of shape (n, H, W, {channels}), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


class FeatureFuser(TransformerMixin, BaseEstimator):
    """Images -> fused multi-level feature maps from the frozen backbone.

    ``fit`` only builds the (seeded, frozen) weights.
    """

    def __init__(self, stages=((8, 4), (16, 2), (32, 2)), kernel_size=5, seed=0):
        self.stages = stages
        self.kernel_size = kernel_size
        self.seed = seed

    def fit(self, X=None, y=None):
        self.backbone_ = FrozenBackbone(BackboneConfig(self.stages, self.kernel_size, self.seed))
        return self

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        X = check_images(X)
        return np.stack([self.backbone_.fused(x).data for x in X])


class TFANet(OutlierMixin, BaseEstimator):
    """Template-conditioned feature reconstruction anomaly detector.

    Parameters
    ----------
    preset : {"desk", "full"}
        Base configuration; the remaining parameters override it when set.
    variant : {"c", "b", "a", "vanilla"}
        Which half is kept after aggregation and whether refinement runs.
    template_index : int
        Index into the training images of the fixed normal template.
    mode : {"dual", "euc", "cos"}
        Anomaly map used for scoring.

    After ``fit``, ``score_samples`` returns image-level anomaly scores where
    larger means more anomalous, and ``anomaly_maps`` returns smoothed
    per-pixel maps at image resolution.
    """

    def __init__(self, preset="desk", variant="c", patch_size=None, epochs=None, lr=None,
                 weight_decay=None, batch_size=None, mask_ratio=None, w_euc=None, w_cos=None,
                 template_index=0, sigma=None, mode="dual", clip_cos=False, seed=0):
        self.preset = preset
        self.variant = variant
        self.patch_size = patch_size
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.mask_ratio = mask_ratio
        self.w_euc = w_euc
        self.w_cos = w_cos
        self.template_index = template_index
        self.sigma = sigma
        self.mode = mode
        self.clip_cos = clip_cos
        self.seed = seed

    def settings(self) -> RunSettings:
        base = preset(self.preset)
        overrides = {
            "train.variant": check_variant(self.variant),
            "train.template_index": self.template_index,
            "train.seed": self.seed,
            "score.mode": self.mode,
            "score.clip_cos": self.clip_cos,
        }
        for key, val in (("embed.patch_size", self.patch_size), ("train.epochs", self.epochs),
                         ("train.lr", self.lr), ("train.weight_decay", self.weight_decay),
                         ("train.batch_size", self.batch_size), ("train.mask_ratio", self.mask_ratio),
                         ("train.w_euc", self.w_euc), ("train.w_cos", self.w_cos),
                         ("score.sigma", self.sigma)):
            if val is not None:
                overrides[key] = val
        return apply_overrides(base, overrides)

    def fit(self, X, y=None):
        """Train on normal images ``X`` (``n x H x W x 3``, already normalised)."""
        X = check_images(X)
        st = self.settings()
        size = st.preprocess.image_size
        if X.shape[1:3] != (size, size):
            raise ValueError(f"preset expects {size}x{size} images, got {X.shape[1:3]}")
        ds = Dataset(root=Path("."), train=[Sample(f"train/{i:03d}", x) for i, x in enumerate(X)],
                     preprocess=st.preprocess)
        self._set_checkpoint(fit(st, ds))
        return self

    def _set_checkpoint(self, ck: Checkpoint):
        self.checkpoint_ = ck
        self.loss_history_ = list(ck.loss_history)
        self.scorer_ = Scorer.from_checkpoint(ck)
        self.n_features_in_ = int(np.prod(ck.template_image.shape))

    def transform(self, X):
        """Fused feature maps of ``X`` (the reconstruction targets)."""
        check_is_fitted(self, "scorer_")
        return self.scorer_.features(check_images(X))

    def reconstruct(self, X):
        check_is_fitted(self, "scorer_")
        return self.scorer_.reconstruct(self.transform(X))

    def score_all(self, X):
        check_is_fitted(self, "scorer_")
        return self.scorer_.score(check_images(X), mode=self.mode)

    def score_samples(self, X):
        return np.array([r.image_score for r in self.score_all(X)])

    def decision_function(self, X):
        return self.score_samples(X)

    def anomaly_maps(self, X):
        return np.stack([r.final.data for r in self.score_all(X)])

    def attention(self, X):
        """Template-directed attention mass per patch, ``n x (H/K) x (W/K)``."""
        check_is_fitted(self, "scorer_")
        return attention_maps(self.transform(X), self.scorer_.template, self.checkpoint_.weights)

    def predict(self, X, threshold: float | None = None):
        """-1 for anomalous, 1 for normal, against ``threshold`` on the image score."""
        if threshold is None:
            raise ValueError("predict needs an explicit threshold on the image score")
        return np.where(self.score_samples(X) > threshold, -1, 1)

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path) -> "TFANet":
        ck = load_checkpoint(path)
        tr = ck.settings.train
        est = cls(preset=tr.preset, variant=tr.variant, template_index=tr.template_index,
                  mode=ck.settings.score.mode, clip_cos=ck.settings.score.clip_cos, seed=tr.seed)
        est._set_checkpoint(ck)
        return est
