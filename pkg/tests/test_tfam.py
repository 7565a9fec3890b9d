import math
import time

import numpy as np
import pytest

from tfanet import numerics as nx
from tfanet.backbone import FusedFeatureMap
from tfanet.config import preset
from tfanet.tfam import (
    EmbedConfig,
    ModelWeights,
    TokenSequence,
    aggregate_tfam,
    attention_map,
    inverse_project,
    param_shapes,
    patchify,
    project_tokens,
    reconstruct,
    refine_fdrm,
    unpatchify,
)
from tfanet.trainer import train_step_loss
from helpers import numeric_grad, rel_err

TOY = EmbedConfig(height=8, width=8, channels=6, patch_size=2, tfam_dim=16, tfam_depth=1,
                  tfam_heads=2, fdrm_dim=16, fdrm_depth=1, fdrm_heads=2)


def randomized(cfg, seed=0, scale=0.3):
    """Weights with every parameter perturbed, so gamma/beta/bias paths are exercised."""
    w = ModelWeights.init(cfg, seed)
    rng = np.random.default_rng(seed)
    for t in w.params.values():
        t.data = t.data + rng.normal(0, scale, size=t.shape)
    return w


def fmap(cfg, seed, source="input"):
    data = np.random.default_rng(seed).normal(size=(cfg.height, cfg.width, cfg.channels))
    return FusedFeatureMap(data, source=source)


def test_config_rejects_bad_geometry():
    with pytest.raises(nx.DimensionError):
        EmbedConfig(height=10, width=8, patch_size=4)
    with pytest.raises(ValueError):
        EmbedConfig(tfam_dim=10, tfam_heads=4)


def test_full_scale_token_counts_and_stacks():
    cfg = preset("full").embed
    assert (cfg.height, cfg.width, cfg.channels, cfg.patch_size) == (64, 64, 1856, 4)
    assert cfg.n_tokens == 256
    assert cfg.stacks() == {"tfam": {"blocks": 12, "dim": 768, "heads": 12},
                            "fdrm": {"blocks": 8, "dim": 512, "heads": 16}}
    assert any(n == "bridge.weight" for n, _ in param_shapes(cfg))


def test_patchify_round_trip():
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 3))
    p = patchify(x, 2)
    assert p.shape == (2, 16, 12)
    assert np.array_equal(p[0, 1], x[0, 0:2, 2:4].reshape(-1))
    assert np.array_equal(unpatchify(p, 2, 8, 8), x)


def test_zero_map_gives_positional_embedding():
    w = ModelWeights.init(TOY)
    e = project_tokens(FusedFeatureMap(np.zeros((8, 8, 6))), w)
    assert np.array_equal(e.tokens.data[0], w["pos_embed"].data)


def test_patch_locality():
    w = randomized(TOY)
    a = fmap(TOY, 1)
    b = FusedFeatureMap(a.data.copy())
    b.data[2:4, 4:6] += 1.0  # patch row 1, col 2 -> index 1*4+2
    diff = np.any(project_tokens(a, w).tokens.data[0] != project_tokens(b, w).tokens.data[0], axis=1)
    assert np.flatnonzero(diff).tolist() == [6]


def test_role_follows_source():
    w = ModelWeights.init(TOY)
    assert project_tokens(fmap(TOY, 0, "template"), w).role == "template"
    assert project_tokens(fmap(TOY, 0), w).role == "input"


def test_identical_halves_give_identical_outputs():
    w = randomized(TOY)
    f = fmap(TOY, 2)
    e = project_tokens(f, w)
    inp, tpl = aggregate_tfam(e, TokenSequence(e.tokens, "template"), w)
    assert np.array_equal(inp.tokens.data, tpl.tokens.data)


def test_concatenation_length_is_2n():
    w = ModelWeights.init(TOY)
    sink = []
    aggregate_tfam(project_tokens(fmap(TOY, 0), w), project_tokens(fmap(TOY, 1, "template"), w), w, sink)
    assert sink[0].shape == (1, TOY.tfam_heads, 2 * TOY.n_tokens, 2 * TOY.n_tokens)
    np.testing.assert_allclose(sink[0].sum(axis=-1), 1.0, atol=1e-12)


def test_full_geometry_concat_has_512_tokens():
    cfg = EmbedConfig(height=64, width=64, channels=1856, patch_size=4, tfam_dim=8, tfam_depth=1,
                      tfam_heads=1, fdrm_dim=8, fdrm_depth=0, fdrm_heads=1)
    w = ModelWeights.init(cfg)
    sink = []
    aggregate_tfam(project_tokens(np.zeros((64, 64, 1856)), w),
                   project_tokens(np.zeros((64, 64, 1856)), w, "template"), w, sink)
    assert sink[0].shape[-1] == 512


def test_mismatched_token_counts():
    w = ModelWeights.init(TOY)
    a = TokenSequence(nx.Tensor(np.zeros((1, 16, 16))), "input")
    b = TokenSequence(nx.Tensor(np.zeros((1, 8, 16))), "template")
    with pytest.raises(nx.DimensionError):
        aggregate_tfam(a, b, w)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def oracle_block(x, p, prefix):
    """Single-head pre-norm block written out token by token."""
    g = lambda name: p[f"{prefix}.{name}"].data  # noqa: E731
    h = _ln(x, g("ln1.gamma"), g("ln1.beta"))
    q = h @ g("attn.q.weight") + g("attn.q.bias")
    k = h @ g("attn.k.weight") + g("attn.k.bias")
    v = h @ g("attn.v.weight") + g("attn.v.bias")
    d = x.shape[1]
    ctx = np.zeros_like(x)
    for i in range(x.shape[0]):
        s = np.array([q[i] @ k[j] / math.sqrt(d) for j in range(x.shape[0])])
        a = np.exp(s - s.max())
        a /= a.sum()
        ctx[i] = sum(a[j] * v[j] for j in range(x.shape[0]))
    x = x + ctx @ g("attn.proj.weight") + g("attn.proj.bias")
    h = _ln(x, g("ln2.gamma"), g("ln2.beta"))
    h = _gelu(h @ g("mlp.fc1.weight") + g("mlp.fc1.bias")) @ g("mlp.fc2.weight") + g("mlp.fc2.bias")
    return x + h


TINY = EmbedConfig(height=2, width=1, channels=3, patch_size=1, tfam_dim=4, tfam_depth=1,
                   tfam_heads=1, fdrm_dim=4, fdrm_depth=1, fdrm_heads=1)


def test_aggregation_matches_attention_oracle():
    w = randomized(TINY, seed=4)
    a, t = fmap(TINY, 5), fmap(TINY, 6, "template")
    inp, tpl = aggregate_tfam(project_tokens(a, w), project_tokens(t, w), w)
    e_a = patchify(a.data[None], 1)[0] @ w["patch.weight"].data + w["patch.bias"].data + w["pos_embed"].data
    e_t = patchify(t.data[None], 1)[0] @ w["patch.weight"].data + w["patch.bias"].data + w["pos_embed"].data
    out = oracle_block(np.concatenate([e_a, e_t]), w.params, "tfam.0")
    np.testing.assert_allclose(inp.tokens.data[0], out[:2], atol=1e-12)
    np.testing.assert_allclose(tpl.tokens.data[0], out[2:], atol=1e-12)


def test_refinement_matches_oracle():
    w = randomized(TINY, seed=7)
    x = np.random.default_rng(8).normal(size=(2, 4))
    out = refine_fdrm(TokenSequence(nx.Tensor(x[None]), "template_aggregated"), w)
    assert out.role == "reconstructed" and out.tokens.shape == (1, 2, 4)
    np.testing.assert_allclose(out.tokens.data[0], oracle_block(x, w.params, "fdrm.0"), atol=1e-12)


def test_refinement_empty_stack_is_bridge():
    cfg = EmbedConfig(height=4, width=4, channels=2, patch_size=2, tfam_dim=8, tfam_depth=1,
                      tfam_heads=2, fdrm_dim=4, fdrm_depth=0, fdrm_heads=1)
    w = randomized(cfg)
    x = np.random.default_rng(1).normal(size=(1, 4, 8))
    out = refine_fdrm(TokenSequence(nx.Tensor(x), "template_aggregated"), w)
    np.testing.assert_allclose(out.tokens.data, x @ w["bridge.weight"].data + w["bridge.bias"].data)


def test_refinement_role_contract():
    w = ModelWeights.init(TOY)
    with pytest.raises(nx.ContractError):
        refine_fdrm(TokenSequence(nx.Tensor(np.zeros((1, 16, 16))), "input"), w)


def test_inverse_projection_undoes_projection():
    cfg = EmbedConfig(height=4, width=4, channels=2, patch_size=2, tfam_dim=8, tfam_depth=1,
                      tfam_heads=2, fdrm_dim=8, fdrm_depth=1, fdrm_heads=2)
    w = ModelWeights.init(cfg)
    rng = np.random.default_rng(3)
    proj = rng.normal(size=(8, 8)) + 3 * np.eye(8)
    bias = rng.normal(size=8)
    inv = np.linalg.inv(proj)
    w["patch.weight"].data, w["patch.bias"].data = proj, bias
    w["head.weight"].data, w["head.bias"].data = inv, -bias @ inv
    w["pos_embed"].data = np.zeros_like(w["pos_embed"].data)
    f = fmap(cfg, 9)
    e = project_tokens(f, w)
    back = inverse_project(TokenSequence(e.tokens, "reconstructed"), w)[0]
    assert back.source == "reconstructed"
    np.testing.assert_allclose(back.data, f.data, atol=1e-10)


def test_inverse_projection_zero_and_locality():
    w = randomized(TOY)
    w["head.bias"].data = np.zeros_like(w["head.bias"].data)
    zeros = np.zeros((1, TOY.n_tokens, TOY.fdrm_dim))
    assert np.all(inverse_project(TokenSequence(nx.Tensor(zeros), "reconstructed"), w)[0].data == 0)
    bumped = zeros.copy()
    bumped[0, 5] = 1.0
    out = inverse_project(TokenSequence(nx.Tensor(bumped), "reconstructed"), w)[0].data
    changed = np.argwhere(np.any(out != 0, axis=-1))
    assert set(map(tuple, changed)) <= {(2, 2), (2, 3), (3, 2), (3, 3)}


@pytest.mark.parametrize("variant", ["vanilla", "a", "b", "c"])
def test_reconstruction_geometry(variant):
    w = randomized(TOY)
    out = reconstruct(fmap(TOY, 1), fmap(TOY, 2, "template"), w, variant)
    assert out.shape == (8, 8, 6) and out.source == "reconstructed"


def test_variant_c_equals_a_when_input_is_template():
    w = randomized(TOY)
    f = fmap(TOY, 3)
    tpl = FusedFeatureMap(f.data.copy(), source="template")
    assert np.array_equal(reconstruct(f, tpl, w, "c").data, reconstruct(f, tpl, w, "a").data)


def test_vanilla_ignores_template():
    w = randomized(TOY)
    f = fmap(TOY, 3)
    a = reconstruct(f, fmap(TOY, 4, "template"), w, "vanilla")
    b = reconstruct(f, fmap(TOY, 5, "template"), w, "vanilla")
    assert np.array_equal(a.data, b.data)


def test_shared_head_and_positional_embedding():
    w = randomized(TOY)
    f_in, f_tpl = fmap(TOY, 1), fmap(TOY, 2, "template")
    before = (project_tokens(f_in, w).tokens.data, project_tokens(f_tpl, w).tokens.data)
    w["pos_embed"].data = w["pos_embed"].data + 0.5
    after = (project_tokens(f_in, w).tokens.data, project_tokens(f_tpl, w).tokens.data)
    np.testing.assert_allclose(after[0] - before[0], 0.5)
    np.testing.assert_allclose(after[1] - before[1], 0.5)
    # the same parameter objects serve both paths
    with nx.Tape() as tape:
        e1 = project_tokens(f_in, w)
        e2 = project_tokens(f_tpl, w)
        loss = nx.sum(nx.add(nx.sum(e1.tokens), nx.sum(e2.tokens)))
    used = {id(t) for rec in tape.records for t in rec.inputs}
    assert id(w["patch.weight"]) in used and id(w["pos_embed"]) in used
    assert tape.backward(loss)[w["patch.weight"]].any()


def test_attention_map_bounds():
    w = randomized(TOY)
    f = fmap(TOY, 1)
    m = attention_map(f, FusedFeatureMap(f.data.copy(), source="template"), w)
    assert m.shape == TOY.grid
    assert np.all(m > 0) and np.all(m <= 1)


def test_weights_round_trip_bitwise():
    w = randomized(TOY)
    for t in w.params.values():
        t.data = t.data.astype(np.float32).astype(np.float64)
    w2 = ModelWeights.from_arrays(TOY, w.arrays())
    f, t = fmap(TOY, 1), fmap(TOY, 2, "template")
    assert np.array_equal(reconstruct(f, t, w, "c").data, reconstruct(f, t, w2, "c").data)


def test_end_to_end_gradient_every_parameter():
    """L_rec through the toy variant-C model (with masking) against central differences."""
    t0 = time.perf_counter()
    w = randomized(TOY, seed=1, scale=0.1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 8, 8, 6))
    tpl = rng.normal(size=(8, 8, 6))

    def loss_value():
        return train_step_loss(w, x, tpl, "c", 0.25, nx.Rng(3), 1.0, 5.0)[2].item()

    with nx.Tape() as tape:
        loss = train_step_loss(w, x, tpl, "c", 0.25, nx.Rng(3), 1.0, 5.0)[2]
    grads = tape.backward(loss)
    worst = {}
    for name, t in w.params.items():
        num = numeric_grad(loss_value, t.data)
        # key biases shift every logit in a row equally; their gradient is zero up to rounding
        if max(np.abs(num).max(), np.abs(grads[t]).max()) < 1e-8:
            assert name.endswith("attn.k.bias"), name
            continue
        worst[name] = rel_err(grads[t], num)
    assert max(worst.values()) < 1e-4, worst
    assert grads[w["mask_token"]].any()
    assert time.perf_counter() - t0 < 30


def test_variants_take_distinct_paths():
    w = randomized(TOY)
    f, t = fmap(TOY, 1), fmap(TOY, 2, "template")
    outs = {v: reconstruct(f, t, w, v).data for v in ("vanilla", "a", "b", "c")}
    for x in outs:
        for y in outs:
            if x < y:
                assert not np.allclose(outs[x], outs[y]), (x, y)
