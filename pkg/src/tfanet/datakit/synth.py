"""Procedural textured parts with structural and logical defects.

Every image is a background texture plus a fixed layout of coloured parts.
Structural defects corrupt the texture locally; logical defects remove or
duplicate a part, which leaves local statistics normal but breaks the global
layout.  Each defective image is rendered from the same random draws as a
defect-free twin, and its mask is exactly the set of pixels that differ.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..numerics import Rng
from .formats import to_uint8, write_pnm

TEXTURES = ("stripes", "checker", "blobs")
STRUCTURAL = ("patch_swap", "scratch")
LOGICAL = ("missing_part", "duplicated_part")
DEFECT_KINDS = STRUCTURAL + LOGICAL

# (kind, centre y, centre x as fractions of the image size, radius fraction, colour)
PARTS = (
    ("disc", 0.30, 0.30, 0.10, (0.80, 0.20, 0.20)),
    ("disc", 0.70, 0.70, 0.10, (0.20, 0.30, 0.80)),
    ("square", 0.30, 0.70, 0.08, (0.20, 0.65, 0.30)),
)


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 64
    texture: str = "stripes"
    n_train: int = 200
    n_test_normal: int = 40
    n_test_defect: int = 40
    defect_kinds: tuple = DEFECT_KINDS
    defect_size_range: tuple = (8, 16)
    seed: int = 7
    noise: float = 0.015

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        bad = set(self.defect_kinds) - set(DEFECT_KINDS)
        if bad or not self.defect_kinds:
            raise ValueError(f"unknown defect kinds {sorted(bad)}")
        lo, hi = self.defect_size_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid defect_size_range {self.defect_size_range}")


@dataclass
class Scene:
    """Random draws for one image; rendering it is deterministic."""

    texture: np.ndarray
    parts: list = field(default_factory=list)  # (kind, cy, cx, r, colour)
    noise: np.ndarray | None = None


def _texture(spec: SynthSpec, rng: Rng) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    if spec.texture == "stripes":
        phase = rng.uniform(0, 2 * np.pi)
        v = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + 0.25 * yy) / 8.0 + phase)
    elif spec.texture == "checker":
        oy, ox = rng.integers(0, 8, size=2)
        v = (((yy + oy) // 4 + (xx + ox) // 4) % 2).astype(np.float64)
        v = ndimage.gaussian_filter(v, 0.7, mode="wrap")
    else:
        v = ndimage.gaussian_filter(rng.normal(size=(s, s)), 3.0, mode="wrap")
        v = (v - v.min()) / (v.max() - v.min())
    light = np.array([0.78, 0.74, 0.62])
    dark = np.array([0.46, 0.42, 0.36])
    return light * (1 - v[..., None]) + dark * v[..., None]


def _part_mask(kind: str, cy: float, cx: float, r: float, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    if kind == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def normal_scene(spec: SynthSpec, rng: Rng) -> Scene:
    s = spec.image_size
    tex = _texture(spec, rng.child("texture"))
    jitter = rng.child("jitter").uniform(-1.0, 1.0, size=(len(PARTS), 2))
    parts = [
        (kind, fy * s + jy, fx * s + jx, fr * s, colour)
        for (kind, fy, fx, fr, colour), (jy, jx) in zip(PARTS, jitter)
    ]
    noise = rng.child("noise").normal(0.0, spec.noise, size=(s, s, 3))
    return Scene(tex, parts, noise)


def render(scene: Scene, s: int) -> np.ndarray:
    img = scene.texture.copy()
    for kind, cy, cx, r, colour in scene.parts:
        img[_part_mask(kind, cy, cx, r, s)] = colour
    if scene.noise is not None:
        img = img + scene.noise
    return np.clip(img, 0.0, 1.0)


def _segment_mask(s, y0, x0, y1, x1, width) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= (width / 2) ** 2


def apply_defect(scene: Scene, kind: str, spec: SynthSpec, rng: Rng) -> np.ndarray:
    """Render ``scene`` with one defect of ``kind`` (float image in [0, 1])."""
    s = spec.image_size
    lo, hi = spec.defect_size_range
    size = int(rng.integers(lo, hi + 1))
    if kind == "missing_part":
        drop = int(rng.integers(len(scene.parts)))
        return render(Scene(scene.texture, [p for i, p in enumerate(scene.parts) if i != drop], scene.noise), s)
    if kind == "duplicated_part":
        src = scene.parts[int(rng.integers(len(scene.parts)))]
        for _ in range(200):
            cy, cx = rng.uniform(src[3] + 1, s - src[3] - 1, size=2)
            if all((cy - p[1]) ** 2 + (cx - p[2]) ** 2 > (src[3] + p[3] + 3) ** 2 for p in scene.parts):
                break
        extra = (src[0], cy, cx, src[3], src[4])
        return render(Scene(scene.texture, scene.parts + [extra], scene.noise), s)
    img = render(scene, s)
    if kind == "scratch":
        y0, x0 = rng.uniform(4, s - 4, size=2)
        ang = rng.uniform(0, np.pi)
        length = max(size, 2) * 1.5
        y1 = np.clip(y0 + length * np.sin(ang), 0, s - 1)
        x1 = np.clip(x0 + length * np.cos(ang), 0, s - 1)
        m = _segment_mask(s, y0, x0, y1, x1, width=rng.uniform(1.5, 3.0))
        shade = rng.choice([0.08, 0.95])
        img[m] = shade + rng.normal(0, 0.02, size=(int(m.sum()), 3))
        return np.clip(img, 0, 1)
    # patch_swap: a rotated, colour-shifted copy of another region
    y, x = rng.integers(0, s - size + 1, size=2)
    sy, sx = rng.integers(0, s - size + 1, size=2)
    patch = np.rot90(img[sy:sy + size, sx:sx + size], k=1)
    img[y:y + size, x:x + size] = np.clip(patch[..., ::-1] * 0.9 + 0.05, 0, 1)
    return img


def _defect_kinds(spec: SynthSpec) -> list[str]:
    return [spec.defect_kinds[i % len(spec.defect_kinds)] for i in range(spec.n_test_defect)]


def generate(spec: SynthSpec):
    """Yield ``(relative_path, uint8 image, uint8 mask or None)`` in write order."""
    root = Rng(spec.seed).child("synth")
    s = spec.image_size
    for i in range(spec.n_train):
        yield f"train/good/{i:03d}.ppm", to_uint8(render(normal_scene(spec, root.child(f"train{i}")), s)), None
    for i in range(spec.n_test_normal):
        yield f"test/good/{i:03d}.ppm", to_uint8(render(normal_scene(spec, root.child(f"good{i}")), s)), None
    counters: dict[str, int] = {}
    for i, kind in enumerate(_defect_kinds(spec)):
        r = root.child(f"defect{i}")
        scene = normal_scene(spec, r)
        twin = to_uint8(render(scene, s))
        for attempt in range(100):
            img = to_uint8(apply_defect(scene, kind, spec, r.child(f"{kind}{attempt}")))
            mask = (img != twin).any(axis=2)
            if mask.any():
                break
        assert np.array_equal(img[~mask], twin[~mask])
        j = counters.get(kind, 0)
        counters[kind] = j + 1
        yield f"test/{kind}/{j:03d}.ppm", img, (mask * 255).astype(np.uint8)


def synth_dataset(spec: SynthSpec, out, force: bool = False) -> Path:
    """Write the dataset tree under ``out`` and return its root."""
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass force=True to overwrite")
        shutil.rmtree(out)
    for rel, img, mask in generate(spec):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pnm(path, img)
        if mask is not None:
            gt = out / "ground_truth" / path.parent.name / path.with_suffix(".pgm").name
            gt.parent.mkdir(parents=True, exist_ok=True)
            write_pnm(gt, mask)
    return out
