import numpy as np
import pytest

from wafervit import tensor as T
from wafervit.errors import ConfigError, ShapeError
from wafervit.tensor import Tensor
from wafervit.trainer import bce_loss
from wafervit.vit import (PRESETS, VitConfig, VitModel, attention, count_params, embed,
                          encode, encoder_layer, forward, init_weights, param_shapes, patchify,
                          unpatchify)

from helpers import (brute_force_element_count, micro_end_to_end_gradcheck, naive_attention,
                     naive_layer_norm, naive_gelu)

MICRO = VitConfig.preset("micro")


def micro(seed=0, dtype=None, **kw):
    cfg = VitConfig.preset("micro", **kw)
    return init_weights(cfg, seed, dtype=dtype)


def layer_arrays(D, U, rng):
    lp = {"ln1.gamma": 1 + 0.1 * rng.normal(size=D), "ln1.beta": 0.1 * rng.normal(size=D),
          "ln2.gamma": 1 + 0.1 * rng.normal(size=D), "ln2.beta": 0.1 * rng.normal(size=D),
          "mlp.w1": rng.normal(size=(D, U)) / np.sqrt(D), "mlp.b1": 0.1 * rng.normal(size=U),
          "mlp.w2": rng.normal(size=(U, D)) / np.sqrt(U), "mlp.b2": 0.1 * rng.normal(size=D)}
    for n in "qkvo":
        lp[f"attn.w{n}"] = rng.normal(size=(D, D)) / np.sqrt(D)
        lp[f"attn.b{n}"] = 0.1 * rng.normal(size=D)
    return lp


# -- config ---------------------------------------------------------------

def test_presets_match_variant_table():
    assert PRESETS["tiny"] == dict(layers=12, hidden_size=192, heads=3, mlp_size=768)
    assert PRESETS["small"] == dict(layers=12, hidden_size=384, heads=6, mlp_size=1536)
    assert PRESETS["base"] == dict(layers=12, hidden_size=768, heads=12, mlp_size=3072)
    m = VitConfig.preset("micro")
    assert (m.layers, m.hidden_size, m.heads, m.mlp_size, m.patch_size, m.image_size) == (4, 64, 4, 256, 8, 32)


def test_paper_configuration_has_196_patches():
    cfg = VitConfig.preset("tiny", image_size=224, patch_size=16)
    assert cfg.num_patches == 196
    assert cfg.patch_dim == 768


@pytest.mark.parametrize("kw", [dict(image_size=30, patch_size=8), dict(hidden_size=64, heads=5),
                                dict(norm_placement="middle"), dict(in_channels=2)])
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        VitConfig(**kw)


def test_config_dict_round_trip():
    cfg = VitConfig.preset("small", norm_placement="post", num_outputs=38, head_mode="multiclass")
    assert VitConfig.from_dict(cfg.to_dict()) == cfg


# -- parameter count -------------------------------------------------------

def test_tiny_imagenet_count_is_about_5_7m():
    cfg = VitConfig.preset("tiny", in_channels=3, num_outputs=1000)
    n = count_params(cfg)
    assert 5_500_000 <= n <= 5_900_000
    assert n == 5_717_416


@pytest.mark.parametrize("name", ["tiny", "small", "base", "micro"])
@pytest.mark.parametrize("channels", [1, 3])
def test_count_params_equals_instantiated_elements(name, channels):
    cfg = VitConfig.preset(name, in_channels=channels)
    if name == "base":  # avoid allocating 86M floats: count via shapes
        assert count_params(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())
        return
    assert count_params(cfg) == brute_force_element_count(init_weights(cfg, 0))


@pytest.mark.parametrize("name", ["large", "huge"])
def test_count_params_closed_form_for_table_only_presets(name):
    cfg = VitConfig.preset(name)
    assert count_params(cfg) == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_head_contribution_for_eight_outputs():
    shapes = param_shapes(VitConfig.preset("tiny"))
    assert np.prod(shapes["head.weight"]) + np.prod(shapes["head.bias"]) == 192 * 8 + 8 == 1544


# -- init -------------------------------------------------------------------

def test_init_is_deterministic_per_seed():
    a, b, c = micro(3), micro(3), micro(4)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert not np.array_equal(a.params["patch_embed.weight"].data, c.params["patch_embed.weight"].data)


def test_init_values():
    m = micro(0)
    for name, p in m.named_parameters():
        if name.endswith("gamma"):
            assert np.all(p.data == 1.0)
        elif name.endswith(".beta") or name.rsplit(".", 1)[-1].startswith("b"):
            assert np.all(p.data == 0.0), name
    w = m.params["layers.0.mlp.w1"].data
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert 0.015 < w.std() < 0.02
    np.testing.assert_array_equal(m.params["rgb_adapter.weight"].data, np.float32(1 / 3))


def test_rgb_adapter_replicates_grayscale_scaled_by_a_third():
    from wafervit.vit import rgb_adapter
    m = micro(0)
    img = np.random.default_rng(0).uniform(size=(1, 1, 4, 4)).astype(np.float32)
    out = rgb_adapter(Tensor(img), m.params["rgb_adapter.weight"], m.params["rgb_adapter.bias"]).data
    assert out.shape == (1, 3, 4, 4)
    for ch in range(3):
        np.testing.assert_allclose(out[0, ch], img[0, 0] / 3, rtol=1e-6)


# -- patchify / embed --------------------------------------------------------

def test_patchify_shapes():
    assert patchify(Tensor(np.zeros((3, 224, 224))), 16).shape == (196, 768)
    assert patchify(Tensor(np.zeros((3, 32, 32))), 8).shape == (16, 192)
    assert patchify(Tensor(np.zeros((2, 3, 32, 32))), 8).shape == (2, 16, 192)
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((3, 30, 30))), 8)


def test_patchify_layout_channel_major_then_row_major():
    img = np.arange(3 * 4 * 4, dtype=np.float64).reshape(3, 4, 4)
    with T.precision(np.float64):
        rows = patchify(Tensor(img), 2).data
    # second patch sits at grid position (0, 1): columns 2..3 of rows 0..1
    expected = np.concatenate([img[c, 0:2, 2:4].ravel() for c in range(3)])
    np.testing.assert_array_equal(rows[1], expected)


def test_patchify_round_trip():
    img = np.random.default_rng(1).normal(size=(3, 32, 32))
    with T.precision(np.float64):
        np.testing.assert_array_equal(unpatchify(patchify(Tensor(img), 8).data, 3, 8), img)


def test_embed_of_zero_patches_is_position_embedding():
    m = micro(0)
    m.params["cls_token"].data[:] = 0
    out = embed(Tensor(np.zeros((16, 192))), m).data
    np.testing.assert_array_equal(out, m.params["pos_embed"].data)


def test_embed_shape_for_tiny():
    m = init_weights(VitConfig.preset("tiny", layers=0), 0)
    assert embed(Tensor(np.zeros((196, 768))), m).shape == (197, 192)
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((195, 768))), m)


def test_embed_rows_permute_with_patches_when_pos_is_zero():
    m = micro(0)
    m.params["pos_embed"].data[:] = 0
    x = np.random.default_rng(2).normal(size=(16, 192)).astype(np.float32)
    perm = np.random.default_rng(3).permutation(16)
    a, b = embed(Tensor(x), m).data, embed(Tensor(x[perm]), m).data
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1:][perm], b[1:], atol=1e-6)


# -- attention ----------------------------------------------------------------

def _lp(arrays):
    return {k: Tensor(v) for k, v in arrays.items()}


def test_attention_matches_naive_per_head_oracle():
    rng = np.random.default_rng(4)
    lp = layer_arrays(4, 8, rng)
    x = rng.normal(size=(3, 4))
    with T.precision(np.float64):
        out, w = attention(Tensor(x), _lp(lp), heads=2, return_weights=True)
    ref, ref_w = naive_attention(x, *(lp[f"attn.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")), heads=2)
    np.testing.assert_allclose(out.data, ref, atol=1e-6, rtol=0)
    np.testing.assert_allclose(w.data[0], ref_w, atol=1e-6, rtol=0)


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(5)
    lp = layer_arrays(4, 8, rng)
    x = rng.normal(size=(1, 4))
    with T.precision(np.float64):
        out = attention(Tensor(x), _lp(lp), heads=2).data
    expected = (x @ lp["attn.wv"] + lp["attn.bv"]) @ lp["attn.wo"] + lp["attn.bo"]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_identical_tokens_give_identical_rows():
    rng = np.random.default_rng(6)
    lp = layer_arrays(8, 8, rng)
    x = np.repeat(rng.normal(size=(1, 8)), 2, axis=0)
    out = attention(Tensor(x), _lp(lp), heads=2).data
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_rows_are_distributions():
    m = micro(1)
    x = Tensor(np.random.default_rng(7).normal(size=(2, 17, 64)).astype(np.float32))
    _, w = attention(x, m.layer_params(0), heads=4, return_weights=True)
    assert w.shape == (2, 4, 17, 17)
    assert np.all(w.data >= 0)
    assert np.abs(w.data.sum(axis=-1) - 1).max() <= 1e-6


# -- encoder layer ---------------------------------------------------------------

def test_zero_weight_pre_norm_layer_is_identity():
    m = micro(0)
    lp = m.layer_params(0)
    for k, p in lp.items():
        if k.startswith(("attn.", "mlp.")):
            p.data[:] = 0
    x = np.random.default_rng(8).normal(size=(2, 17, 64)).astype(np.float32)
    np.testing.assert_array_equal(encoder_layer(Tensor(x), lp, m.config).data, x)


@pytest.mark.parametrize("placement", ["pre", "post"])
def test_layer_shape_preserved(placement):
    m = micro(0, norm_placement=placement)
    x = Tensor(np.zeros((3, 17, 64), dtype=np.float32))
    assert encoder_layer(x, m.layer_params(0), m.config).shape == (3, 17, 64)


def test_post_norm_layer_matches_hand_rolled_oracle():
    rng = np.random.default_rng(9)
    D, U, H = 8, 16, 2
    lp = layer_arrays(D, U, rng)
    x = rng.normal(size=(5, D))
    cfg = VitConfig(image_size=8, patch_size=8, hidden_size=D, heads=H, mlp_size=U, layers=1,
                    norm_placement="post")
    with T.precision(np.float64):
        out = encoder_layer(Tensor(x), _lp(lp), cfg).data
    msa, _ = naive_attention(x, *(lp[f"attn.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")), heads=H)
    z = naive_layer_norm(x + msa, lp["ln1.gamma"], lp["ln1.beta"], cfg.ln_eps)
    ffn = naive_gelu(z @ lp["mlp.w1"] + lp["mlp.b1"]) @ lp["mlp.w2"] + lp["mlp.b2"]
    ref = naive_layer_norm(z + ffn, lp["ln2.gamma"], lp["ln2.beta"], cfg.ln_eps)
    np.testing.assert_allclose(out, ref, atol=1e-6, rtol=0)


# -- forward ---------------------------------------------------------------------

def test_forward_shapes():
    m = micro(0)
    assert forward(Tensor(np.zeros((1, 32, 32))), m).shape == (8,)
    assert forward(Tensor(np.zeros((5, 1, 32, 32))), m).shape == (5, 8)
    with pytest.raises(ShapeError):
        forward(Tensor(np.zeros((2, 3, 32, 32))), m)
    with pytest.raises(ShapeError):
        forward(Tensor(np.zeros((2, 1, 64, 64))), m)


def test_identical_images_give_identical_logits():
    m = micro(0)
    img = np.random.default_rng(0).uniform(size=(1, 1, 32, 32)).astype(np.float32)
    out = forward(Tensor(np.concatenate([img, img])), m).data
    assert np.array_equal(out[0], out[1])
    # a different batch size may change BLAS summation order, so only closeness
    np.testing.assert_allclose(out[0], forward(Tensor(img), m).data[0], atol=1e-6)


def _logits_from_patches(patches, m):
    z = embed(patches, m)
    for i in range(m.config.layers):
        z = encoder_layer(z, m.layer_params(i), m.config)
    z = T.layer_norm(z, m.params["final_ln.gamma"], m.params["final_ln.beta"], m.config.ln_eps)
    return (z.data[:, 0] @ m.params["head.weight"].data + m.params["head.bias"].data), z.data


def test_cls_logits_invariant_to_patch_permutation_without_pos_embed():
    m = micro(2)
    m.params["pos_embed"].data[:] = 0
    x = np.random.default_rng(10).normal(size=(2, 16, 192)).astype(np.float32)
    perm = np.random.default_rng(11).permutation(16)
    a, za = _logits_from_patches(Tensor(x), m)
    b, zb = _logits_from_patches(Tensor(x[:, perm]), m)
    assert np.abs(a - b).max() <= 1e-5
    assert np.abs(za[:, 1:][:, perm] - zb[:, 1:]).max() <= 1e-5


def test_zero_layer_model_reads_final_ln_of_cls_row():
    m = init_weights(VitConfig.preset("micro", layers=0), 0)
    img = np.random.default_rng(12).uniform(size=(1, 1, 32, 32)).astype(np.float32)
    out = forward(Tensor(img), m).data
    z0 = m.params["cls_token"].data[0] + m.params["pos_embed"].data[0]
    ref = naive_layer_norm(z0.astype(np.float64), 1.0, 0.0, 1e-5) @ m.params["head.weight"].data
    np.testing.assert_allclose(out[0], ref, atol=1e-5)


def test_every_parameter_gets_finite_gradient():
    m = micro(0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 32, 32)).astype(np.float32))
    T.backward(bce_loss(m(x), np.ones((2, 8))))
    for name, p in m.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name
        assert np.all(np.isfinite(p.grad)), name


def test_end_to_end_gradient_matches_finite_differences():
    errors = micro_end_to_end_gradcheck(entries_per_tensor=5, seed=0)
    assert len(errors) == len(param_shapes(MICRO))
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-3, (worst, errors[worst])


def test_dropout_only_active_in_training():
    m = micro(0, dropout=0.5)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 32, 32)).astype(np.float32))
    a, b = m(x).data, m(x).data
    assert np.array_equal(a, b)
    c = m(x, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, c)


def test_model_copy_is_independent():
    m = micro(0)
    c = m.copy()
    c.params["head.bias"].data[:] = 7
    assert np.all(m.params["head.bias"].data == 0)


def test_model_rejects_wrong_parameter_set():
    m = micro(0)
    params = dict(m.params)
    params.pop("head.bias")
    with pytest.raises(ConfigError):
        VitModel(m.config, params)


def test_encode_shape():
    m = micro(0)
    assert encode(Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32)), m).shape == (2, 17, 64)
