import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parallax import tensor as T
from parallax.errors import DimensionError, UsageError
from parallax.tensor import Tensor
from parallax.vit import (
    RECIPES,
    Attention,
    Block,
    BlockVariant,
    PatchEmbed,
    Recipe,
    block_forward,
    build_classifier,
    count_block_params,
    count_params,
    get_recipe,
    patchify,
    unpatchify,
)

VARIANTS = list(BlockVariant)


def _zero_all(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


# ----------------------------------------------------------------------
# recipes
# ----------------------------------------------------------------------
def test_recipe_rows():
    ti = get_recipe("Ti/16")
    assert (ti.layers, ti.hidden_dim, ti.heads, ti.mlp_size) == (12, 192, 3, 768)
    for r in RECIPES.values():
        assert r.mlp_size == 4 * r.hidden_dim
        assert r.hidden_dim % r.heads == 0


def test_recipe_validation():
    with pytest.raises(DimensionError):
        Recipe("bad", 2, 10, 40, 3)
    with pytest.raises(DimensionError):
        Recipe("bad", 2, 12, 48, 3, patch_size=5, image_size=32)
    with pytest.raises(UsageError):
        get_recipe("XL/16")


def test_variant_parse():
    assert BlockVariant.parse("parallel_stabilized") is BlockVariant.PARALLEL_STABILIZED
    with pytest.raises(UsageError):
        BlockVariant.parse("parallel")


# ----------------------------------------------------------------------
# patch embedding
# ----------------------------------------------------------------------
@pytest.mark.parametrize("size,p,n", [(32, 16, 4), (224, 16, 196)])
def test_token_counts(size, p, n):
    emb = PatchEmbed(p, 8, n, np.random.default_rng(0))
    assert emb(Tensor(np.zeros((1, 3, size, size)))).shape == (1, n, 8)


def test_zero_image_gives_position_embedding():
    emb = PatchEmbed(4, 8, 4, np.random.default_rng(0))
    emb.proj.bias.data[...] = 0.0
    out = emb(Tensor(np.zeros((2, 3, 8, 8))))
    np.testing.assert_array_equal(out.data, np.broadcast_to(emb.pos_embed.data, (2, 4, 8)))


def test_patchify_roundtrip_and_order():
    x = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8)
    tokens = patchify(Tensor(x), 4)
    assert tokens.shape == (2, 4, 48)
    # first token = top-left patch, flattened (row, col, channel)
    np.testing.assert_array_equal(tokens.data[0, 0], x[0, :, :4, :4].transpose(1, 2, 0).reshape(-1))
    np.testing.assert_array_equal(unpatchify(tokens, 4, 2).data, x)


# ----------------------------------------------------------------------
# attention
# ----------------------------------------------------------------------
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1e3))
def test_qk_norm_bounds_logits(seed, scale):
    rng = np.random.default_rng(seed)
    attn = Attention(16, 4, True, rng)
    x = Tensor(rng.standard_normal((2, 6, 16)) * scale)
    logits, _ = attn.logits(x)
    assert np.abs(logits.data).max() <= math.sqrt(4) + 1e-4


def test_zero_output_projection_gives_zero():
    attn = Attention(8, 2, False, np.random.default_rng(0))
    attn.out.weight.data[...] = 0.0
    attn.out.bias.data[...] = 0.0
    out = attn(Tensor(np.random.default_rng(1).standard_normal((2, 5, 8))))
    assert not out.data.any()


def test_single_token_attends_to_itself():
    rng = np.random.default_rng(2)
    attn = Attention(8, 2, True, rng)
    x = Tensor(rng.standard_normal((1, 1, 8)))
    logits, _ = attn.logits(x)
    np.testing.assert_array_equal(T.softmax(logits).data, np.ones((1, 2, 1, 1)))
    np.testing.assert_allclose(attn(x).data, attn.out(attn.v(x)).data, rtol=1e-6)


def test_qk_norm_drops_qkv_bias():
    assert Attention(8, 2, True).q.bias is None
    assert Attention(8, 2, False).q.bias is not None


# ----------------------------------------------------------------------
# blocks
# ----------------------------------------------------------------------
@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_block_is_identity(variant):
    blk = Block(8, 32, 2, variant, np.random.default_rng(0))
    _zero_all(blk)
    x = np.random.default_rng(1).standard_normal((2, 5, 8)).astype(np.float32)
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_block_jacobian_is_identity(variant):
    blk = Block(4, 16, 2, variant, np.random.default_rng(0)).astype(np.float64)
    _zero_all(blk)
    x = np.random.default_rng(1).standard_normal((1, 3, 4))
    jac = np.zeros((x.size, x.size))
    h = 1e-6
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        plus = blk(Tensor(x + e.reshape(x.shape))).data.reshape(-1)
        minus = blk(Tensor(x - e.reshape(x.shape))).data.reshape(-1)
        jac[:, i] = (plus - minus) / (2 * h)
    np.testing.assert_allclose(jac, np.eye(x.size), atol=1e-8)


def test_stabilized_with_identity_hook_matches_raw():
    raw = Block(8, 32, 2, BlockVariant.PARALLEL_RAW, np.random.default_rng(0))
    stab = Block(8, 32, 2, BlockVariant.PARALLEL_STABILIZED, np.random.default_rng(0))
    stab.stabilizer_identity = True
    x = Tensor(np.random.default_rng(1).standard_normal((2, 5, 8)))
    np.testing.assert_array_equal(raw(x).data, stab(x).data)
    stab.stabilizer_identity = False
    assert not np.allclose(raw(x).data, stab(x).data)


def test_variant_formulas():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    for variant in VARIANTS:
        blk = Block(8, 32, 2, variant, np.random.default_rng(4))
        if variant is BlockVariant.SERIAL:
            h = x + blk.attn(blk.norm1(x))
            ref = h + blk.mlp(blk.norm2(h))
        else:
            y = blk.norm1(x)
            m = blk.mlp(y)
            if variant is BlockVariant.PARALLEL_STABILIZED:
                m = blk.mlp_norm(m)
            ref = x + m + blk.attn(y)
        np.testing.assert_allclose(block_forward(x, blk, variant).data, ref.data, rtol=1e-6)


def test_block_forward_checks_inputs():
    blk = Block(8, 32, 2, "serial")
    with pytest.raises(DimensionError):
        block_forward(Tensor(np.zeros((2, 5, 6))), blk)
    with pytest.raises(UsageError):
        block_forward(Tensor(np.zeros((2, 5, 8))), blk, "parallel_raw")


# ----------------------------------------------------------------------
# classifier and parameter counts
# ----------------------------------------------------------------------
def test_tiny_classifier_shape_and_determinism():
    recipe = get_recipe("Ti/16").at(32, 4, 10)
    a = build_classifier(recipe, "parallel_stabilized", seed=7)
    b = build_classifier(recipe, "parallel_stabilized", seed=7)
    assert len(a.blocks) == 12 and a.blocks[0].attn.heads == 3
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    out = a(Tensor(np.zeros((2, 3, 32, 32))))
    assert out.shape == (2, 10)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("recipe", ["Ti/16", "S/16"])
def test_closed_form_count_matches_instantiated(recipe, variant):
    r = get_recipe(recipe)
    model = build_classifier(r.at(224, 16, 1000), variant, initialize=False)
    assert model.num_params() == count_params(r, variant, 224, 16, 1000)


def test_block_count_formula():
    d = 192
    assert count_block_params(d, 4 * d, 3, "serial") == 12 * d * d + 13 * d
    assert count_block_params(d, 4 * d, 3, "parallel_raw") == 12 * d * d + 10 * d
    assert count_block_params(d, 4 * d, 3, "parallel_stabilized") == 12 * d * d + 12 * d


def test_small_rows_against_reference():
    s = get_recipe("S/16")
    assert count_params(s, "serial") == pytest.approx(22.2e6, rel=0.02)
    assert count_params(s, "parallel_raw") == pytest.approx(22.1e6, rel=0.02)
    ti = get_recipe("Ti/16")
    assert count_params(ti, "parallel_raw") < count_params(ti, "serial")
    assert count_params(ti, "parallel_stabilized") < count_params(ti, "serial")
