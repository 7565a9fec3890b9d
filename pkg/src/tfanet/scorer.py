"""Dual-mode anomaly maps, smoothing and image-level scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import FrozenBackbone, FusedFeatureMap
from .numerics import ContractError, DimensionError, bilinear_resize
from .tfam import reconstruct_batch

MODES = ("dual", "euc", "cos")
COS_EPS = 1e-12


@dataclass
class AnomalyMap:
    data: np.ndarray
    stage: str = "raw"  # raw | upsampled | smoothed


@dataclass
class AnomalyResult:
    final: AnomalyMap
    euc_map: AnomalyMap
    cos_map: AnomalyMap
    image_score: float


def _data(F):
    return F.data if isinstance(F, FusedFeatureMap) else np.asarray(F, dtype=np.float64)


def component_maps(F, F_hat, clip_cos: bool = False):
    """Per-location ``(euc, cos)`` maps over the channel axis; any leading shape."""
    a, b = _data(F), _data(F_hat)
    if a.shape != b.shape:
        raise DimensionError(f"feature maps differ: {a.shape} vs {b.shape}")
    euc = np.sqrt(((a - b) ** 2).sum(axis=-1))
    na = np.maximum(np.sqrt((a * a).sum(axis=-1)), COS_EPS)
    nb = np.maximum(np.sqrt((b * b).sum(axis=-1)), COS_EPS)
    cos = 1.0 - (a * b).sum(axis=-1) / (na * nb)
    if clip_cos:
        cos = np.maximum(cos, 0.0)
    return euc, cos


def combine(euc, cos, mode: str = "dual"):
    if mode == "dual":
        return euc * cos
    if mode == "euc":
        return euc
    if mode == "cos":
        return cos
    raise ValueError(f"unknown scoring mode {mode!r}; expected one of {MODES}")


def anomaly_map(F, F_hat, mode: str = "dual", clip_cos: bool = False):
    """Return ``(final, euc, cos)`` raw maps; ``final`` is the elementwise product in dual mode."""
    euc, cos = component_maps(F, F_hat, clip_cos)
    return AnomalyMap(combine(euc, cos, mode)), AnomalyMap(euc), AnomalyMap(cos)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian truncated at radius ``ceil(3 sigma)``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of the last two axes with mirror padding (edge pixel repeated)."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(img, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="symmetric")
        win = np.lib.stride_tricks.sliding_window_view(p, len(k), axis=axis)
        out = win @ k
    return out


def upsample(m: np.ndarray, target) -> np.ndarray:
    th, tw = target
    return bilinear_resize(np.asarray(m)[..., None], th, tw).data[..., 0]


def postprocess(m, target, sigma: float) -> AnomalyMap:
    """Bilinear upsampling to ``target`` followed by Gaussian smoothing."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    data = m.data if isinstance(m, AnomalyMap) else m
    return AnomalyMap(gaussian_blur(upsample(data, target), sigma), "smoothed")


def image_score(m) -> float:
    """Population standard deviation of a smoothed map."""
    if isinstance(m, AnomalyMap):
        if m.stage != "smoothed":
            raise ContractError(f"image_score expects a smoothed map, got stage {m.stage!r}")
        m = m.data
    return float(np.std(m))


class Scorer:
    """Scores images with a trained model and its template.

    ``score_features`` works on precomputed fused features so ablations can
    reuse one backbone pass across modes.
    """

    def __init__(self, weights, template_image, settings, variant: str | None = None,
                 backbone: FrozenBackbone | None = None):
        self.weights = weights
        self.settings = settings
        self.variant = variant or settings.train.variant
        self.backbone = backbone or FrozenBackbone(settings.backbone)
        self.image_size = settings.preprocess.image_size
        cfg = weights.config
        expected = settings.backbone.fused_shape(self.image_size, self.image_size)
        if expected != (cfg.height, cfg.width, cfg.channels):
            raise ContractError(
                f"backbone yields fused maps {expected} but the model expects "
                f"{(cfg.height, cfg.width, cfg.channels)}")
        self.template = self.backbone.fused(template_image, "template").data

    @classmethod
    def from_checkpoint(cls, ck, variant: str | None = None) -> "Scorer":
        if ck.template_image is None:
            raise ContractError("checkpoint carries no template image")
        return cls(ck.weights, ck.template_image, ck.settings, variant)

    def features(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:3] != (self.image_size, self.image_size):
            raise ContractError(
                f"image geometry {images.shape[1:3]} does not match the checkpoint's "
                f"{(self.image_size, self.image_size)}")
        return np.stack([self.backbone.fused(im).data for im in images])

    def reconstruct(self, feats: np.ndarray, batch: int = 16) -> np.ndarray:
        tpl = None if self.variant == "vanilla" else self.template
        parts = [reconstruct_batch(feats[i:i + batch], tpl, self.weights, self.variant)
                 for i in range(0, len(feats), batch)]
        return np.concatenate(parts)

    def score_features(self, feats: np.ndarray, recon: np.ndarray | None = None,
                       mode: str | None = None, sigma: float | None = None) -> list[AnomalyResult]:
        sc = self.settings.score
        mode = mode or sc.mode
        sigma = sigma if sigma is not None else sc.resolved_sigma(self.image_size)
        if recon is None:
            recon = self.reconstruct(feats)
        euc, cos = component_maps(feats, recon, sc.clip_cos)
        final = combine(euc, cos, mode)
        target = (self.image_size, self.image_size)
        out = []
        for f, e, c in zip(final, euc, cos):
            sm = postprocess(f, target, sigma)
            out.append(AnomalyResult(sm, AnomalyMap(upsample(e, target), "upsampled"),
                                     AnomalyMap(upsample(c, target), "upsampled"), image_score(sm)))
        return out

    def score(self, images, mode: str | None = None, sigma: float | None = None) -> list[AnomalyResult]:
        return self.score_features(self.features(images), mode=mode, sigma=sigma)


def score_sample(image, template, checkpoint, mode: str | None = None) -> AnomalyResult:
    """Score one image against ``template`` with a trained checkpoint (no masking)."""
    tpl = checkpoint.template_image if template is None else template
    return Scorer(checkpoint.weights, tpl, checkpoint.settings).score(image, mode=mode)[0]
