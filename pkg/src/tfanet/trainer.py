"""Training of the reconstruction model: joint loss, token masking, AdamW, checkpoints."""

from __future__ import annotations

import logging
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import FrozenBackbone, FusedFeatureMap
from .config import RunSettings, from_text, to_text
from .datakit.formats import FormatError
from .numerics import ContractError, DimensionError, NonFiniteError, Rng
from .tfam import (
    NO_DECAY_SUFFIXES,
    ModelWeights,
    TokenSequence,
    forward_patches,
    patchify,
    project_tokens,
)

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"TFAR"
CKPT_VERSION = 1
COS_EPS = 1e-12


class TrainingDiverged(FloatingPointError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class LossBreakdown:
    l_euc: float
    l_cos: float
    l_rec: float


# losses ----------------------------------------------------------------------------

def loss_terms(target, pred, w_euc: float = 1.0, w_cos: float = 5.0):
    """Differentiable ``(l_euc, l_cos, l_rec)`` over the last (channel) axis.

    Both terms are averaged over every spatial location and batch element.
    """
    target, pred = nx.as_tensor(target), nx.as_tensor(pred)
    if target.shape != pred.shape:
        raise DimensionError(f"loss operands differ: {target.shape} vs {pred.shape}")
    l_euc = nx.mean(nx.vector_norm(nx.sub(target, pred)))
    dot = nx.sum(nx.mul(target, pred), axis=-1)
    denom = nx.mul(nx.vector_norm(target, COS_EPS), nx.vector_norm(pred, COS_EPS))
    l_cos = nx.mean(nx.sub(1.0, nx.div(dot, denom)))
    l_rec = nx.add(nx.mul(l_euc, w_euc), nx.mul(l_cos, w_cos))
    return l_euc, l_cos, l_rec


def loss_rec(F, F_hat, w_euc: float = 1.0, w_cos: float = 5.0) -> LossBreakdown:
    a = F.data if isinstance(F, FusedFeatureMap) else F
    b = F_hat.data if isinstance(F_hat, FusedFeatureMap) else F_hat
    e, c, r = loss_terms(a, b, w_euc, w_cos)
    return LossBreakdown(e.item(), c.item(), r.item())


# masking ---------------------------------------------------------------------------

def mask_indices(n_tokens: int, rho: float, rng: Rng) -> np.ndarray:
    count = int(np.floor(rho * n_tokens))
    return np.sort(rng.choice(n_tokens, size=count, replace=False)) if count else np.zeros(0, int)


def mask_tokens(e: TokenSequence, rho: float, rng: Rng, w: ModelWeights) -> TokenSequence:
    """Replace ``floor(rho * N)`` random input tokens by ``mask_token + pos_embed``.

    Each batch element draws its own index set from a child stream of ``rng``.
    """
    if e.role != "input":
        raise ContractError(f"only input tokens are masked, got role {e.role!r}")
    b, n, _ = e.tokens.shape
    m = np.zeros((b, n, 1))
    for i in range(b):
        m[i, mask_indices(n, rho, rng.child(i)), 0] = 1.0
    if not m.any():
        return e
    fill = nx.add(w["mask_token"], w["pos_embed"])
    tokens = nx.add(nx.mul(e.tokens, 1.0 - m), nx.mul(fill, m))
    return TokenSequence(tokens, "input")


# optimiser ---------------------------------------------------------------------------

def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def adamw_step(params: dict, grads: dict, moments: dict, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8, t: int = 1, decay=None):
    """One bias-corrected AdamW update; returns ``(params, moments)`` as new dicts.

    ``params`` and ``grads`` map names to arrays; ``moments`` maps names to
    ``(m, v)``.  Decoupled decay multiplies by ``1 - lr * weight_decay`` for
    names where ``decay(name)`` is true.
    """
    if t < 1:
        raise ContractError("adam step counter starts at 1")
    decay = decay or decays
    b1, b2 = betas
    new_p, new_m = OrderedDict(), OrderedDict()
    for name, p in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if weight_decay and decay(name):
            p = p * (1 - lr * weight_decay)
        new_p[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name] = (m, v)
    return new_p, new_m


class AdamW:
    """Stateful wrapper; parameters and moments are kept on the float32 grid."""

    def __init__(self, lr=1e-3, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.t = 0
        self.moments: OrderedDict = OrderedDict()

    def step(self, weights: ModelWeights, grads: nx.Gradients) -> None:
        self.t += 1
        params = weights.arrays()
        g = {k: grads[t] for k, t in weights.params.items()}
        new_p, new_m = adamw_step(params, g, self.moments, self.lr, self.weight_decay,
                                  self.betas, self.eps, self.t)
        for name, arr in new_p.items():
            weights.params[name].data = _f32(arr)
        self.moments = OrderedDict((k, (_f32(m), _f32(v))) for k, (m, v) in new_m.items())


# checkpoint format -------------------------------------------------------------------

@dataclass
class Checkpoint:
    settings: RunSettings
    weights: ModelWeights
    moments: OrderedDict = field(default_factory=OrderedDict)
    step: int = 0
    epoch: int = 0
    template_id: str = ""
    template_image: np.ndarray | None = None
    loss_history: list = field(default_factory=list)
    backbone_checksum: str = ""

    def meta_text(self) -> str:
        hist = ",".join(repr(float(x)) for x in self.loss_history)
        return (f"meta.epoch={self.epoch}\nmeta.step={self.step}\n"
                f"meta.template={self.template_id}\nmeta.backbone_sha256={self.backbone_checksum}\n"
                f"meta.loss_history={hist}\n")


def _record(name: str, arr) -> bytes:
    arr = np.asarray(arr)
    nb = name.encode()
    out = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return out + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_record(buf: bytes, pos: int):
    (ln,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    name = buf[pos:pos + ln].decode()
    pos += ln
    rank = buf[pos]
    pos += 1
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if pos + 4 * count > len(buf):
        raise FormatError(f"record {name!r} truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(shape)
    return name, arr, pos + 4 * count


def encode_checkpoint(ck: Checkpoint) -> bytes:
    text = (to_text(ck.settings) + ck.meta_text()).encode()
    out = bytearray(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    out += struct.pack("<I", len(text)) + text
    records = list(ck.weights.arrays().items())
    if ck.template_image is not None:
        records.append(("buffer.template_image", ck.template_image))
    out += struct.pack("<I", len(records))
    for name, arr in records:
        out += _record(name, arr)
    out += struct.pack("<I", 2 * len(ck.moments))
    for name, (m, v) in ck.moments.items():
        out += _record(f"m.{name}", m) + _record(f"v.{name}", v)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{source}: not a TFAR checkpoint")
    if len(buf) < 14 or struct.unpack_from("<I", buf, len(buf) - 4)[0] != zlib.crc32(buf[:-4]):
        raise FormatError(f"{source}: CRC mismatch")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    (tlen,) = struct.unpack_from("<I", buf, 6)
    text = buf[10:10 + tlen].decode()
    pos = 10 + tlen
    settings = from_text(text)
    meta = {}
    for line in text.splitlines():
        if line.startswith("meta."):
            k, _, v = line.partition("=")
            meta[k[5:]] = v
    arrays = OrderedDict()
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    for _ in range(n):
        name, arr, pos = _read_record(buf, pos)
        arrays[name] = arr
    template = arrays.pop("buffer.template_image", None)
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    raw = OrderedDict()
    for _ in range(n):
        name, arr, pos = _read_record(buf, pos)
        raw[name] = arr
    moments = OrderedDict()
    for name in arrays:
        if f"m.{name}" in raw:
            moments[name] = (raw[f"m.{name}"], raw[f"v.{name}"])
    hist = meta.get("loss_history", "")
    return Checkpoint(
        settings=settings,
        weights=ModelWeights.from_arrays(settings.embed, arrays),
        moments=moments,
        step=int(meta.get("step", 0)),
        epoch=int(meta.get("epoch", 0)),
        template_id=meta.get("template", ""),
        template_image=template,
        loss_history=[float(x) for x in hist.split(",")] if hist else [],
        backbone_checksum=meta.get("backbone_sha256", ""),
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), source=str(path))


# training loop -------------------------------------------------------------------------

def train_step_loss(w: ModelWeights, targets: np.ndarray, template: np.ndarray | None,
                    variant: str, mask_ratio: float, rng: Rng | None, w_euc: float, w_cos: float):
    """Forward pass for one batch; returns the three loss tensors.

    The loss compares against the unmasked targets; patch layout only
    permutes locations, so per-location terms are unchanged.
    """
    k = w.config.patch_size
    e_in = project_tokens(targets, w, "input")
    if mask_ratio > 0 and rng is not None:
        e_in = mask_tokens(e_in, mask_ratio, rng, w)
    e_tpl = project_tokens(template, w, "template") if variant != "vanilla" else None
    patches = forward_patches(e_in, e_tpl, w, variant)
    b, n, _ = patches.shape
    c = w.config.channels
    pred = nx.reshape(patches, (b, n * k * k, c))
    tgt = patchify(targets, k).reshape(b, n * k * k, c)
    return loss_terms(tgt, pred, w_euc, w_cos)


def train_features(features: np.ndarray, template: np.ndarray, settings: RunSettings,
                   weights: ModelWeights | None = None, optimizer: AdamW | None = None,
                   start_epoch: int = 0, on_epoch=None):
    """Optimise the reconstruction model on precomputed fused features.

    Returns ``(weights, optimizer, history)`` where ``history`` holds the
    mean training ``l_rec`` per epoch.  Batch order and masks depend only on
    ``(seed, epoch, step)``.
    """
    cfg = settings.train
    if weights is None:
        weights = ModelWeights.init(settings.embed, seed=cfg.seed)
    if optimizer is None:
        optimizer = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    root = Rng(cfg.seed).child("train")
    n = features.shape[0]
    history = []
    step = optimizer.t
    for epoch in range(start_epoch, cfg.epochs):
        order = root.child(f"epoch{epoch}").permutation(n)
        total, count = 0.0, 0
        for bstart in range(0, n, cfg.batch_size):
            idx = order[bstart:bstart + cfg.batch_size]
            batch = features[idx]
            try:
                with nx.Tape() as tape:
                    l_euc, l_cos, l_rec = train_step_loss(
                        weights, batch, template, cfg.variant, cfg.mask_ratio,
                        root.child(f"mask{epoch}.{bstart}"), cfg.w_euc, cfg.w_cos)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at step {step} (epoch {epoch}): {exc}") from exc
            if not np.isfinite(l_rec.item()):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: l_euc={l_euc.item()} l_cos={l_cos.item()}")
            grads = tape.backward(l_rec)
            optimizer.step(weights, grads)
            step += 1
            total += l_rec.item() * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
        logger.info("epoch %d  l_rec %.5f", epoch + 1, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, weights, optimizer, history)
    return weights, optimizer, history


def fit(settings: RunSettings, dataset, out=None, log=None, features=None) -> Checkpoint:
    """Train on ``dataset.train`` with ``dataset.train[template_index]`` as template."""
    cfg = settings.train
    train = dataset.train
    if not train:
        raise ContractError("training set is empty")
    if not 0 <= cfg.template_index < len(train):
        raise ContractError(
            f"template_index {cfg.template_index} out of range for {len(train)} training images")
    backbone = FrozenBackbone(settings.backbone)
    checksum = backbone.checksum()
    if features is None:
        features = np.stack([backbone.fused(s.image).data for s in train])
    tpl_sample = train[cfg.template_index]
    tpl_image = _f32(tpl_sample.image)
    template = backbone.fused(tpl_image, "template").data
    history: list = []

    def snapshot(epoch, weights, opt, hist) -> Checkpoint:
        return Checkpoint(settings, weights, opt.moments, opt.t, epoch, tpl_sample.name,
                          tpl_image, list(hist), checksum)

    def on_epoch(epoch, weights, opt, hist):
        if log is not None:
            log(epoch, hist[-1])
        if out is not None and cfg.checkpoint_interval and epoch % cfg.checkpoint_interval == 0:
            save_checkpoint(snapshot(epoch, weights, opt, hist), out)

    weights, opt, history = train_features(features, template, settings, on_epoch=on_epoch)
    if backbone.checksum() != checksum:
        raise RuntimeError("frozen backbone weights changed during training")
    ck = snapshot(cfg.epochs, weights, opt, history)
    if out is not None:
        save_checkpoint(ck, out)
    return ck
