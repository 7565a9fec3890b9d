"""Template-conditioned transformer reconstruction of fused feature maps.

Input and template feature maps are cut into ``K x K`` patches and embedded
by one shared projection head plus one shared positional embedding.  The
aggregation stack attends jointly over the concatenated ``2N`` tokens; the
template half is kept and refined by a second stack, then mapped back to
patches.  Variants ``vanilla``, ``a`` and ``b`` are the ablations of that
pipeline.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .backbone import FusedFeatureMap
from .numerics import ContractError, DimensionError, Rng, Tensor

VARIANTS = ("vanilla", "a", "b", "c")
ROLES = ("input", "template", "concatenated", "template_aggregated", "reconstructed")

# parameters excluded from weight decay, matched by name suffix
NO_DECAY_SUFFIXES = (".gamma", ".beta", ".bias", "pos_embed", "mask_token")


def check_variant(variant: str) -> str:
    v = str(variant).lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


@dataclass(frozen=True)
class EmbedConfig:
    """Token geometry and transformer stack sizes."""

    height: int = 16
    width: int = 16
    channels: int = 56
    patch_size: int = 2
    tfam_dim: int = 64
    tfam_depth: int = 2
    tfam_heads: int = 4
    fdrm_dim: int = 64
    fdrm_depth: int = 2
    fdrm_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        k = self.patch_size
        if k < 1 or self.height % k or self.width % k:
            raise DimensionError(
                f"patch size {k} must divide the fused extent {self.height}x{self.width}"
            )
        if self.tfam_dim % self.tfam_heads:
            raise ValueError(f"tfam_dim {self.tfam_dim} not divisible by {self.tfam_heads} heads")
        if self.fdrm_dim % self.fdrm_heads:
            raise ValueError(f"fdrm_dim {self.fdrm_dim} not divisible by {self.fdrm_heads} heads")
        if self.tfam_depth < 0 or self.fdrm_depth < 0 or self.mlp_ratio <= 0:
            raise ValueError("depths must be >= 0 and mlp_ratio > 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def stacks(self) -> dict:
        return {
            "tfam": {"blocks": self.tfam_depth, "dim": self.tfam_dim, "heads": self.tfam_heads},
            "fdrm": {"blocks": self.fdrm_depth, "dim": self.fdrm_dim, "heads": self.fdrm_heads},
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    tokens: Tensor  # B x N x D
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown token role {self.role!r}")

    @property
    def n(self) -> int:
        return self.tokens.shape[-2]


def _block_param_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple]]:
    out = [(f"{prefix}.ln1.gamma", (d,)), (f"{prefix}.ln1.beta", (d,))]
    for name in ("q", "k", "v", "proj"):
        out += [(f"{prefix}.attn.{name}.weight", (d, d)), (f"{prefix}.attn.{name}.bias", (d,))]
    out += [
        (f"{prefix}.ln2.gamma", (d,)), (f"{prefix}.ln2.beta", (d,)),
        (f"{prefix}.mlp.fc1.weight", (d, hidden)), (f"{prefix}.mlp.fc1.bias", (hidden,)),
        (f"{prefix}.mlp.fc2.weight", (hidden, d)), (f"{prefix}.mlp.fc2.bias", (d,)),
    ]
    return out


def param_shapes(cfg: EmbedConfig) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` list of every learnable parameter."""
    dt, df = cfg.tfam_dim, cfg.fdrm_dim
    shapes = [
        ("patch.weight", (cfg.patch_dim, dt)),
        ("patch.bias", (dt,)),
        ("pos_embed", (cfg.n_tokens, dt)),
        ("mask_token", (dt,)),
    ]
    for i in range(cfg.tfam_depth):
        shapes += _block_param_shapes(f"tfam.{i}", dt, int(round(dt * cfg.mlp_ratio)))
    if dt != df:
        shapes += [("bridge.weight", (dt, df)), ("bridge.bias", (df,))]
    for i in range(cfg.fdrm_depth):
        shapes += _block_param_shapes(f"fdrm.{i}", df, int(round(df * cfg.mlp_ratio)))
    shapes += [("head.weight", (df, cfg.patch_dim)), ("head.bias", (cfg.patch_dim,))]
    return shapes


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class ModelWeights:
    """Named parameter tensors of the reconstruction model.

    Values always sit on the float32 grid so a checkpoint round trip is
    lossless.
    """

    def __init__(self, config: EmbedConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(params):
            raise ContractError("parameter names do not match the configured architecture")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = params

    @classmethod
    def init(cls, config: EmbedConfig, seed: int = 0) -> "ModelWeights":
        rng = Rng(seed).child("weights")
        params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in param_shapes(config):
            r = rng.child(name)
            if name.endswith(".gamma"):
                arr = np.ones(shape)
            elif name.endswith((".beta", ".bias")):
                arr = np.zeros(shape)
            elif name in ("pos_embed", "mask_token"):
                arr = r.normal(0.0, 0.02, size=shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                arr = r.uniform(-limit, limit, size=shape)
            params[name] = Tensor(_f32(arr), requires_grad=True, name=name)
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: EmbedConfig, arrays: dict) -> "ModelWeights":
        params = OrderedDict(
            (name, Tensor(_f32(arrays[name]), requires_grad=True, name=name))
            for name, _ in param_shapes(config)
        )
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights.from_arrays(self.config, {k: v.copy() for k, v in self.arrays().items()})


# patch geometry -----------------------------------------------------------------

def _as_batch(F) -> np.ndarray:
    data = F.data if isinstance(F, FusedFeatureMap) else np.asarray(F, dtype=np.float64)
    return data[None] if data.ndim == 3 else data


def patchify(maps: np.ndarray, k: int) -> np.ndarray:
    """``B x H x W x C`` -> ``B x N x (K*K*C)``, patches in row-major order."""
    b, h, w, c = maps.shape
    x = maps.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // k) * (w // k), k * k * c)


def unpatchify(tokens: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, _, pd = tokens.shape
    c = pd // (k * k)
    x = tokens.reshape(b, h // k, w // k, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _check_geometry(maps: np.ndarray, cfg: EmbedConfig) -> None:
    if maps.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise DimensionError(
            f"feature map {maps.shape[1:]} does not match configured geometry "
            f"{(cfg.height, cfg.width, cfg.channels)}"
        )


def project_tokens(F, w: ModelWeights, role: str | None = None) -> TokenSequence:
    """Embed non-overlapping patches with the shared head and add ``pos_embed``."""
    cfg = w.config
    maps = _as_batch(F)
    _check_geometry(maps, cfg)
    if role is None:
        role = "template" if isinstance(F, FusedFeatureMap) and F.source == "template" else "input"
    patches = Tensor(patchify(maps, cfg.patch_size))
    tokens = nx.matmul(patches, w["patch.weight"]) + w["patch.bias"] + w["pos_embed"]
    return TokenSequence(tokens, role)


# transformer ---------------------------------------------------------------------

def _linear(x: Tensor, w: ModelWeights, prefix: str) -> Tensor:
    return nx.matmul(x, w[f"{prefix}.weight"]) + w[f"{prefix}.bias"]


def attention(x: Tensor, w: ModelWeights, prefix: str, heads: int, sink: list | None = None) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(z):
        return nx.transpose(nx.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, w, f"{prefix}.q"))
    k = split(_linear(x, w, f"{prefix}.k"))
    v = split(_linear(x, w, f"{prefix}.v"))
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    probs = nx.softmax_lastdim(scores)
    if sink is not None:
        sink.append(probs.data)
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, t, d))
    return _linear(ctx, w, f"{prefix}.proj")


def transformer_block(x: Tensor, w: ModelWeights, prefix: str, heads: int, sink: list | None = None) -> Tensor:
    """Pre-norm ViT block: attention and GELU MLP, each with a residual path."""
    h = nx.layer_norm(x, w[f"{prefix}.ln1.gamma"], w[f"{prefix}.ln1.beta"])
    x = x + attention(h, w, f"{prefix}.attn", heads, sink)
    h = nx.layer_norm(x, w[f"{prefix}.ln2.gamma"], w[f"{prefix}.ln2.beta"])
    h = _linear(nx.gelu(_linear(h, w, f"{prefix}.mlp.fc1")), w, f"{prefix}.mlp.fc2")
    return x + h


def run_stack(x: Tensor, w: ModelWeights, stack: str, sink: list | None = None) -> Tensor:
    cfg = w.config
    depth = cfg.tfam_depth if stack == "tfam" else cfg.fdrm_depth
    heads = cfg.tfam_heads if stack == "tfam" else cfg.fdrm_heads
    for i in range(depth):
        x = transformer_block(x, w, f"{stack}.{i}", heads, sink)
    return x


def aggregate_tfam(e_in: TokenSequence, e_tpl: TokenSequence, w: ModelWeights, sink: list | None = None):
    """Joint attention over input+template tokens; returns the two halves.

    A template sequence with batch size 1 is shared across an input batch.
    """
    a, t = e_in.tokens, e_tpl.tokens
    if a.shape[-2:] != t.shape[-2:]:
        raise DimensionError(f"input tokens {a.shape} and template tokens {t.shape} differ")
    n = a.shape[-2]
    if t.shape[0] != a.shape[0]:
        if t.shape[0] != 1:
            raise DimensionError(f"template batch {t.shape[0]} does not match input batch {a.shape[0]}")
        t = t + np.zeros((a.shape[0], 1, 1))
    cat = TokenSequence(nx.concat([a, t], axis=1), "concatenated")
    out = run_stack(cat.tokens, w, "tfam", sink)
    return (
        TokenSequence(nx.take(out, (slice(None), slice(0, n))), "input"),
        TokenSequence(nx.take(out, (slice(None), slice(n, 2 * n))), "template_aggregated"),
    )


def bridge(x: Tensor, w: ModelWeights) -> Tensor:
    if "bridge.weight" in w.params:
        return _linear(x, w, "bridge")
    return x


def refine_fdrm(e: TokenSequence, w: ModelWeights, allow_input: bool = False) -> TokenSequence:
    """Bridge to the refinement width and run the refinement stack on N tokens."""
    allowed = ("template_aggregated", "input") if allow_input else ("template_aggregated",)
    if e.role not in allowed:
        raise ContractError(f"refine_fdrm expects role in {allowed}, got {e.role!r}")
    return TokenSequence(run_stack(bridge(e.tokens, w), w, "fdrm"), "reconstructed")


def output_patches(e: TokenSequence, w: ModelWeights) -> Tensor:
    """Affine head; ``B x N x (K*K*C)`` patch vectors."""
    return _linear(e.tokens, w, "head")


def inverse_project(e: TokenSequence, w: ModelWeights) -> list[FusedFeatureMap]:
    """Map each reconstructed token back into its ``K x K`` patch."""
    cfg = w.config
    if e.n != cfg.n_tokens:
        raise DimensionError(f"{e.n} tokens do not match geometry with {cfg.n_tokens}")
    maps = unpatchify(output_patches(e, w).data, cfg.patch_size, cfg.height, cfg.width)
    return [FusedFeatureMap(m, source="reconstructed") for m in maps]


def forward_patches(e_in: TokenSequence, e_tpl: TokenSequence | None, w: ModelWeights,
                    variant: str = "c", sink: list | None = None) -> Tensor:
    """Run a variant from embedded tokens to reconstructed patch vectors."""
    variant = check_variant(variant)
    if variant == "vanilla":
        x = TokenSequence(run_stack(e_in.tokens, w, "tfam", sink), "input")
        rec = refine_fdrm(x, w, allow_input=True)
    else:
        if e_tpl is None:
            raise ContractError(f"variant {variant!r} needs template tokens")
        inp, tpl = aggregate_tfam(e_in, e_tpl, w, sink)
        if variant == "a":
            rec = refine_fdrm(inp, w, allow_input=True)
        elif variant == "b":
            rec = TokenSequence(bridge(tpl.tokens, w), "reconstructed")
        else:
            rec = refine_fdrm(tpl, w)
    return output_patches(rec, w)


def reconstruct_batch(maps: np.ndarray, template: np.ndarray, w: ModelWeights,
                      variant: str = "c") -> np.ndarray:
    """Reconstruct a ``B x H x W x C`` batch against one ``H x W x C`` template."""
    cfg = w.config
    maps = _as_batch(maps)
    e_in = project_tokens(maps, w, "input")
    e_tpl = project_tokens(template, w, "template") if template is not None else None
    patches = forward_patches(e_in, e_tpl, w, variant)
    return unpatchify(patches.data, cfg.patch_size, cfg.height, cfg.width)


def reconstruct(F_in: FusedFeatureMap, F_tpl: FusedFeatureMap | None, w: ModelWeights,
                variant: str = "c") -> FusedFeatureMap:
    variant = check_variant(variant)
    if F_tpl is not None and F_tpl.shape != F_in.shape:
        raise DimensionError(f"input {F_in.shape} and template {F_tpl.shape} geometry differ")
    tpl = None if variant == "vanilla" or F_tpl is None else F_tpl.data
    out = reconstruct_batch(F_in.data, tpl, w, variant)[0]
    return FusedFeatureMap(out, list(F_in.channel_offsets), "reconstructed")


def attention_maps(maps: np.ndarray, template: np.ndarray, w: ModelWeights) -> np.ndarray:
    """Template-directed attention mass per input patch, ``B x (H/K) x (W/K)``.

    For each input token the attention weights onto the N template tokens
    are summed, then averaged over heads and aggregation blocks.
    """
    cfg = w.config
    maps = _as_batch(maps)
    sink: list = []
    e_in = project_tokens(maps, w, "input")
    e_tpl = project_tokens(template, w, "template")
    aggregate_tfam(e_in, e_tpl, w, sink)
    if not sink:
        raise ContractError("attention map needs at least one aggregation block")
    n = cfg.n_tokens
    mass = np.mean([p[:, :, :n, n:].sum(axis=-1).mean(axis=1) for p in sink], axis=0)
    gh, gw = cfg.grid
    return mass.reshape(maps.shape[0], gh, gw)


def attention_map(F_in: FusedFeatureMap, F_tpl: FusedFeatureMap, w: ModelWeights) -> np.ndarray:
    return attention_maps(F_in.data, F_tpl.data, w)[0]
