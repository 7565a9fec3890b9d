"""Frozen multi-level feature extractor and channel-wise fusion."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datakit.formats import FormatError, read_tensor, write_tensor
from .numerics import DimensionError, Rng, Tensor, bilinear_resize, conv2d, relu

SOURCES = ("input", "template", "reconstructed")


@dataclass(frozen=True)
class BackboneConfig:
    """Stage layout of the frozen CNN.

    ``stages`` lists ``(out_channels, stride)`` per hierarchy level; each
    stage is one ``kernel_size`` convolution followed by ReLU.
    """

    stages: tuple = ((8, 4), (16, 2), (32, 2))
    kernel_size: int = 5
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if len(self.stages) < 2:
            raise ValueError("at least two stages are needed for multi-level fusion")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        for c, s in self.stages:
            if c < 1 or s < 1:
                raise ValueError(f"invalid stage {(c, s)}")

    @property
    def channels(self) -> int:
        return sum(c for c, _ in self.stages)

    def level_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """Feature-map shapes for an input of ``height x width``.

        Raises DimensionError naming the first stage whose stride does not
        divide the incoming extent.
        """
        shapes = []
        h, w = height, width
        for i, (c, s) in enumerate(self.stages):
            if h % s or w % s:
                raise DimensionError(
                    f"stage {i} (stride {s}) does not divide incoming extent {h}x{w}"
                )
            h, w = h // s, w // s
            shapes.append((h, w, c))
        return shapes

    def fused_shape(self, height: int, width: int) -> tuple[int, int, int]:
        h, w, _ = self.level_shapes(height, width)[0]
        return h, w, self.channels


@dataclass
class FeaturePyramid:
    levels: list  # list of H_l x W_l x C_l arrays

    def shapes(self):
        return [lvl.shape for lvl in self.levels]


@dataclass
class FusedFeatureMap:
    """``H x W x C`` fused feature map with its per-level channel ranges."""

    data: np.ndarray
    channel_offsets: list = field(default_factory=list)  # (level, start, end)
    source: str = "input"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"fused map must be H x W x C, got {self.data.shape}")
        if not self.channel_offsets:
            self.channel_offsets = [(0, 0, self.data.shape[2])]
        if self.source not in SOURCES:
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def shape(self):
        return self.data.shape

    def level(self, index: int) -> np.ndarray:
        _, start, end = self.channel_offsets[index]
        return self.data[:, :, start:end]


class FrozenBackbone:
    """Seeded random-init CNN standing in for a pretrained extractor.

    Weights are drawn once from ``config.seed`` (He-normal, zero bias) and
    never updated.
    """

    def __init__(self, config: BackboneConfig | None = None, in_channels: int = 3):
        self.config = config or BackboneConfig()
        self.in_channels = in_channels
        rng = Rng(self.config.seed).child("backbone")
        k = self.config.kernel_size
        self.kernels = []
        cin = in_channels
        for i, (cout, _) in enumerate(self.config.stages):
            std = np.sqrt(2.0 / (k * k * cin))
            w = rng.child(i).normal(0.0, std, size=(k, k, cin, cout))
            w = w.astype(np.float32).astype(np.float64)
            w.setflags(write=False)
            self.kernels.append(w)
            cin = cout

    def checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.kernels:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()

    def extract(self, image) -> FeaturePyramid:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != self.in_channels:
            raise DimensionError(f"expected H x W x {self.in_channels} image, got {image.shape}")
        self.config.level_shapes(image.shape[0], image.shape[1])
        pad = self.config.kernel_size // 2
        x = Tensor(image)
        levels = []
        for w, (_, stride) in zip(self.kernels, self.config.stages):
            x = relu(conv2d(x, w, stride=stride, padding=pad))
            levels.append(x.data)
        return FeaturePyramid(levels)

    def fused(self, image, source: str = "input") -> FusedFeatureMap:
        fm = fuse(self.extract(image))
        fm.source = source
        return fm


def extract(image, cfg: BackboneConfig) -> FeaturePyramid:
    return FrozenBackbone(cfg, in_channels=np.shape(image)[-1]).extract(image)


def fuse(pyr: FeaturePyramid, source: str = "input") -> FusedFeatureMap:
    """Resize every level to level-1 resolution and concatenate channel-wise."""
    if len(pyr.levels) < 2:
        raise DimensionError("fusion needs at least two levels")
    h, w = pyr.levels[0].shape[:2]
    parts, offsets, start = [], [], 0
    for i, lvl in enumerate(pyr.levels):
        parts.append(bilinear_resize(lvl, h, w).data)
        offsets.append((i, start, start + lvl.shape[2]))
        start += lvl.shape[2]
    return FusedFeatureMap(np.concatenate(parts, axis=2), offsets, source)


def export_features(fm: FusedFeatureMap, path) -> None:
    """Write ``<path>`` as a ``.ten`` file plus ``<stem>.offsets`` sidecar."""
    path = Path(path)
    write_tensor(path, fm.data)
    lines = [f"# source={fm.source}"] + [f"{lvl},{s},{e}" for lvl, s, e in fm.channel_offsets]
    path.with_suffix(".offsets").write_text("\n".join(lines) + "\n")


def import_features(path) -> FusedFeatureMap:
    """Load an externally computed fused map (e.g. from a pretrained extractor)."""
    path = Path(path)
    data = read_tensor(path)
    if data.ndim != 3:
        raise FormatError(f"{path}: fused features need a 3-axis shape, got {data.shape}")
    sidecar = path.with_suffix(".offsets")
    source, offsets = "input", []
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("source="):
                    source = line.split("=", 1)[1].strip()
                continue
            lvl, s, e = (int(v) for v in line.split(","))
            offsets.append((lvl, s, e))
        if not offsets or offsets[0][1] != 0 or offsets[-1][2] != data.shape[2] or any(
            a[2] != b[1] for a, b in zip(offsets, offsets[1:])
        ):
            raise FormatError(f"{sidecar}: channel ranges do not partition [0, {data.shape[2]})")
    else:
        warnings.warn(f"{sidecar} missing; treating all channels as one level", stacklevel=2)
    return FusedFeatureMap(data, offsets, source)
