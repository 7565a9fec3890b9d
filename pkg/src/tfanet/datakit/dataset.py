"""Loading MVTec-style directory trees into normalised arrays."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import bilinear_resize
from .formats import FormatError, read_pnm

IMAGE_SUFFIXES = (".ppm", ".pgm")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 64
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))


@dataclass
class Sample:
    name: str  # path relative to the dataset root
    image: np.ndarray  # H x W x 3, normalised
    kind: str = "good"
    mask: np.ndarray | None = None  # H x W bool at image resolution

    @property
    def label(self) -> int:
        return 0 if self.kind == "good" else 1


@dataclass
class Dataset:
    root: Path
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    warnings: list = field(default_factory=list)

    def kinds(self) -> list[str]:
        return sorted({s.kind for s in self.test})


def preprocess_image(raw: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """uint8 (or [0, 1] float) RGB -> resized, per-channel normalised float64."""
    img = np.asarray(raw, dtype=np.float64)
    if raw.dtype == np.uint8:
        img = img / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[:2] != (cfg.image_size, cfg.image_size):
        img = bilinear_resize(img, cfg.image_size, cfg.image_size).data
    return (img - np.asarray(cfg.mean)) / np.asarray(cfg.std)


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    return bilinear_resize(mask[..., None].astype(np.float64), size, size).data[..., 0] >= 0.5


def _images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix in IMAGE_SUFFIXES)


def load_dataset(root, preprocess: PreprocessConfig | None = None, load_train: bool = True) -> Dataset:
    """Read ``train/good``, ``test/<kind>`` and ``ground_truth/<kind>`` under ``root``.

    Samples are ordered lexicographically by relative path.  Unknown
    top-level directories are skipped with a recorded warning.
    """
    root = Path(root)
    cfg = preprocess or PreprocessConfig()
    ds = Dataset(root=root, preprocess=cfg)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    for child in sorted(root.iterdir()):
        if child.is_dir() and child.name not in ("train", "test", "ground_truth"):
            msg = f"skipping unknown directory {child.name!r}"
            ds.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
    if load_train:
        good = root / "train" / "good"
        if good.is_dir():
            for p in _images(good):
                ds.train.append(Sample(str(p.relative_to(root)), preprocess_image(read_pnm(p), cfg)))
    test = root / "test"
    if test.is_dir():
        for kind_dir in sorted(d for d in test.iterdir() if d.is_dir()):
            kind = kind_dir.name
            for p in _images(kind_dir):
                mask = None
                if kind != "good":
                    gt = root / "ground_truth" / kind / p.with_suffix(".pgm").name
                    if not gt.exists():
                        raise DatasetError(f"missing ground-truth mask for {p.relative_to(root)}")
                    m = read_pnm(gt)
                    if m.ndim != 2:
                        raise FormatError(f"{gt}: mask must be single-channel")
                    mask = _resize_mask(m > 127, cfg.image_size)
                else:
                    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
                ds.test.append(Sample(str(p.relative_to(root)), preprocess_image(read_pnm(p), cfg), kind, mask))
    return ds


def load_image(path, preprocess: PreprocessConfig | None = None) -> np.ndarray:
    return preprocess_image(read_pnm(path), preprocess or PreprocessConfig())
