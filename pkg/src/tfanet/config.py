"""Presets and the flat ``key=value`` config text used by checkpoints and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .backbone import BackboneConfig
from .datakit.dataset import PreprocessConfig
from .tfam import EmbedConfig, check_variant

PRESETS = ("desk", "full")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    w_euc: float = 1.0
    w_cos: float = 5.0
    mask_ratio: float = 0.3
    template_index: int = 0
    variant: str = "c"
    preset: str = "desk"
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", check_variant(self.variant))
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("invalid optimisation settings")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")


@dataclass(frozen=True)
class ScoreConfig:
    sigma: float | None = None  # None -> 4 * image_size / 256
    mode: str = "dual"
    clip_cos: bool = False

    def resolved_sigma(self, image_size: int) -> float:
        return self.sigma if self.sigma is not None else 4.0 * image_size / 256.0


@dataclass(frozen=True)
class RunSettings:
    """Everything needed to rebuild a model: the union of the per-module configs."""

    backbone: BackboneConfig
    embed: EmbedConfig
    train: TrainConfig
    preprocess: PreprocessConfig
    score: ScoreConfig


def preset(name: str = "desk") -> RunSettings:
    if name == "desk":
        bb = BackboneConfig(stages=((8, 4), (16, 2), (32, 2)), kernel_size=5)
        pre = PreprocessConfig(image_size=64)
        h, w, c = bb.fused_shape(pre.image_size, pre.image_size)
        emb = EmbedConfig(height=h, width=w, channels=c, patch_size=2,
                          tfam_dim=64, tfam_depth=2, tfam_heads=4,
                          fdrm_dim=64, fdrm_depth=2, fdrm_heads=4)
        tr = TrainConfig(preset="desk")
    elif name == "full":
        # channel layout mirrors a wide-resnet stem + layers 1-3 at 256 x 256 input
        bb = BackboneConfig(stages=((64, 4), (256, 1), (512, 2), (1024, 2)), kernel_size=3)
        pre = PreprocessConfig(image_size=256)
        h, w, c = bb.fused_shape(pre.image_size, pre.image_size)
        emb = EmbedConfig(height=h, width=w, channels=c, patch_size=4,
                          tfam_dim=768, tfam_depth=12, tfam_heads=12,
                          fdrm_dim=512, fdrm_depth=8, fdrm_heads=16)
        tr = TrainConfig(epochs=400, lr=1e-3, batch_size=4, preset="full")
    else:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return RunSettings(bb, emb, tr, pre, ScoreConfig())


# flat text form ---------------------------------------------------------------------

_SECTIONS = ("backbone", "embed", "train", "preprocess", "score")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(":".join(str(x) for x in item) for item in v)
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(raw: str, current):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw)
    if isinstance(current, tuple):
        if current and isinstance(current[0], tuple):
            return tuple(tuple(int(x) for x in item.split(":")) for item in raw.split(","))
        return tuple(float(x) for x in raw.split(","))
    return raw


def to_items(settings: RunSettings) -> list[tuple[str, str]]:
    items = []
    for sec in _SECTIONS:
        obj = getattr(settings, sec)
        for f in fields(obj):
            items.append((f"{sec}.{f.name}", _fmt(getattr(obj, f.name))))
    return items


def to_text(settings: RunSettings) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_items(settings))


def known_keys() -> set[str]:
    base = preset("desk")
    return {k for k, _ in to_items(base)}


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(settings: RunSettings, overrides: dict[str, str], strict: bool = True) -> RunSettings:
    """Return ``settings`` with dotted ``section.field`` overrides applied.

    Unknown keys raise KeyError when ``strict``; the embed geometry is
    re-derived from the backbone and image size.
    """
    per = {sec: {} for sec in _SECTIONS}
    for key, raw in overrides.items():
        sec, _, name = key.partition(".")
        if sec not in per:
            if strict:
                raise KeyError(f"unknown config key {key!r}")
            continue
        obj = getattr(settings, sec)
        names = {f.name for f in fields(obj)}
        if name not in names:
            if strict:
                raise KeyError(f"unknown config key {key!r}")
            continue
        per[sec][name] = _parse(raw, getattr(obj, name)) if isinstance(raw, str) else raw
    bb = replace(settings.backbone, **per["backbone"])
    pre = replace(settings.preprocess, **per["preprocess"])
    emb_updates = dict(per["embed"])
    if per["backbone"] or per["preprocess"]:
        h, w, c = bb.fused_shape(pre.image_size, pre.image_size)
        emb_updates.setdefault("height", h)
        emb_updates.setdefault("width", w)
        emb_updates.setdefault("channels", c)
    emb = replace(settings.embed, **emb_updates)
    tr = replace(settings.train, **per["train"])
    sc = replace(settings.score, **per["score"])
    return RunSettings(bb, emb, tr, pre, sc)


def from_text(text: str) -> RunSettings:
    kv = parse_kv_text(text)
    name = kv.get("train.preset", "desk")
    return apply_overrides(preset(name), {k: v for k, v in kv.items() if k in known_keys()})
