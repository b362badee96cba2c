import numpy as np
import pytest

from promptseg.backbone import (
    BackboneConfig,
    count_params,
    decode_mask,
    encode_image,
    forward,
    grid_prompt_tokens,
    init_backbone,
    patch_embed,
    two_way_block,
    vit_layer,
)
from promptseg.checkpoint import load_checkpoint, save_checkpoint
from promptseg.tensor import ParameterStore, Tensor, expand


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, shape)


def tiny_config(**overrides):
    base = dict(height=32, width=32, patch_h=8, patch_w=8, embed_dim=16,
                layers=2, heads=2, mlp_hidden=32, decoder_blocks=2,
                mask_hidden=16)
    base.update(overrides)
    return BackboneConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(height=30, width=32, patch_h=8, patch_w=8)
    with pytest.raises(ValueError, match="heads"):
        tiny_config(embed_dim=15)
    with pytest.raises(ValueError, match="decoder"):
        tiny_config(decoder_blocks=1)


def test_patch_grid_arithmetic():
    cfg = tiny_config()
    assert cfg.grid_rows == 4 and cfg.grid_cols == 4 and cfg.tokens == 16
    store = init_backbone(cfg, seed=0)
    tokens = patch_embed(rand((1, 1, 32, 32), seed=1), store.leaves(), cfg)
    assert tokens.shape == (1, 16, 16)


def test_patch_embed_zero_image_gives_positional_table():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    store.set_value("embed/proj", np.zeros_like(store["embed/proj"]))
    tokens = patch_embed(np.zeros((1, 1, 32, 32)), store.leaves(), cfg)
    assert np.array_equal(tokens.data[0], store["embed/pos"])


def test_patch_embed_permuting_patches_permutes_projection_term():
    # two-patch image: swapping the patches swaps only the projected rows;
    # the positional rows stay put
    cfg = BackboneConfig(height=8, width=16, patch_h=8, patch_w=8,
                         embed_dim=16, layers=1, heads=2, mlp_hidden=16,
                         decoder_blocks=2, mask_hidden=8)
    store = init_backbone(cfg, seed=0)
    img = rand((1, 1, 8, 16), seed=2)
    swapped = img.copy()
    swapped[..., :, :8], swapped[..., :, 8:] = img[..., :, 8:], img[..., :, :8]
    pos = store["embed/pos"]
    t1 = patch_embed(img, store.leaves(), cfg).data[0] - pos
    t2 = patch_embed(swapped, store.leaves(), cfg).data[0] - pos
    assert np.allclose(t1, t2[::-1], atol=1e-15)


def test_patch_embed_rejects_wrong_size():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    with pytest.raises(ValueError, match="does not match"):
        patch_embed(np.zeros((1, 1, 16, 16)), store.leaves(), cfg)


def test_vit_layer_preserves_token_count():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    tokens = Tensor(rand((2, 16, 16), seed=3))
    out = vit_layer(tokens, store.leaves(), 1, cfg)
    assert out.shape == (2, 16, 16)


def test_vit_layer_residual_identity():
    # zero value/output projections and zero second MLP affine leave only
    # the residual paths: output equals input exactly
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    for name in ("attn/wv", "attn/bv", "attn/wo", "attn/bo", "mlp/w2", "mlp/b2"):
        full = "enc/1/" + name
        store.set_value(full, np.zeros_like(store[full]))
    tokens = rand((1, 16, 16), seed=4)
    out = vit_layer(Tensor(tokens), store.leaves(), 1, cfg)
    assert np.array_equal(out.data, tokens)


def test_vit_layer_single_token_closed_form():
    # with one token, attention weights are 1 and the block reduces to
    # x + (ln(x) Wv + bv) Wo + bo followed by the MLP sublayer
    cfg = BackboneConfig(height=8, width=8, patch_h=8, patch_w=8,
                         embed_dim=16, layers=1, heads=2, mlp_hidden=16,
                         decoder_blocks=2, mask_hidden=8)
    store = init_backbone(cfg, seed=5)
    x = rand((1, 1, 16), seed=6)
    lv = store.leaves()
    out = vit_layer(Tensor(x), lv, 1, cfg).data

    def ln(v, g, b):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return g * (v - mu) / np.sqrt(var + 1e-6) + b

    h = ln(x[0, 0], store["enc/1/ln1/gamma"], store["enc/1/ln1/beta"])
    att = (h @ store["enc/1/attn/wv"] + store["enc/1/attn/bv"]) \
        @ store["enc/1/attn/wo"] + store["enc/1/attn/bo"]
    xp = x[0, 0] + att
    h2 = ln(xp, store["enc/1/ln2/gamma"], store["enc/1/ln2/beta"])
    from scipy.special import erf
    pre = h2 @ store["enc/1/mlp/w1"] + store["enc/1/mlp/b1"]
    act = pre * 0.5 * (1 + erf(pre / np.sqrt(2)))
    expect = xp + act @ store["enc/1/mlp/w2"] + store["enc/1/mlp/b2"]
    assert np.allclose(out[0, 0], expect, atol=1e-12)


def test_encode_image_composition():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    img = rand((1, 1, 32, 32), seed=7)
    lv = store.leaves()
    full = encode_image(img, lv, cfg).data
    manual = patch_embed(img, lv, cfg)
    manual = vit_layer(manual, lv, 1, cfg)
    manual = vit_layer(manual, lv, 2, cfg)
    assert np.array_equal(full, manual.data)
    # empty hook set is bitwise identical to the hook-free path
    again = encode_image(img, store.leaves(), cfg, hooks={}).data
    assert np.array_equal(full, again)


def test_encode_image_rejects_bad_hook_depth():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    with pytest.raises(ValueError, match="depth"):
        encode_image(rand((1, 1, 32, 32)), store.leaves(), cfg,
                     hooks={3: lambda *a: None})


def test_two_way_block_shapes_and_residual_identity():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    img_tokens = Tensor(rand((1, 16, 16), seed=8))
    prm_tokens = Tensor(rand((1, 16, 16), seed=9))
    out_i, out_p = two_way_block(img_tokens, prm_tokens, store.leaves(), 1, cfg)
    assert out_i.shape == (1, 16, 16) and out_p.shape == (1, 16, 16)

    for side in ("i2p", "p2i"):
        for name in ("wv", "bv", "wo", "bo"):
            full = "dec/1/%s/%s" % (side, name)
            store.set_value(full, np.zeros_like(store[full]))
    out_i, out_p = two_way_block(img_tokens, prm_tokens, store.leaves(), 1, cfg)
    assert np.array_equal(out_i.data, img_tokens.data)
    assert np.array_equal(out_p.data, prm_tokens.data)


def test_two_way_block_two_token_hand_computation():
    cfg = BackboneConfig(height=8, width=16, patch_h=8, patch_w=8,
                         embed_dim=4, layers=1, heads=1, mlp_hidden=8,
                         decoder_blocks=2, mask_hidden=4)
    store = init_backbone(cfg, seed=10)
    e_img = rand((1, 2, 4), seed=11)
    e_prm = rand((1, 2, 4), seed=12)
    out_i, out_p = two_way_block(Tensor(e_img), Tensor(e_prm),
                                 store.leaves(), 1, cfg)

    def ln(rows, g, b, eps=1e-6):
        mu = rows.mean(axis=-1, keepdims=True)
        var = ((rows - mu) ** 2).mean(axis=-1, keepdims=True)
        return g * (rows - mu) / np.sqrt(var + eps) + b

    def xattn(qs, kvs, p):
        q = ln(qs, store["dec/1/%s_ln/gamma" % ("img" if p == "i2p" else "prm")],
               store["dec/1/%s_ln/beta" % ("img" if p == "i2p" else "prm")])
        q = q @ store["dec/1/%s/wq" % p] + store["dec/1/%s/bq" % p]
        k = kvs @ store["dec/1/%s/wk" % p] + store["dec/1/%s/bk" % p]
        v = kvs @ store["dec/1/%s/wv" % p] + store["dec/1/%s/bv" % p]
        scores = q @ k.T / np.sqrt(4.0)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        return (w @ v) @ store["dec/1/%s/wo" % p] + store["dec/1/%s/bo" % p]

    exp_i = e_img[0] + xattn(e_img[0], e_prm[0], "i2p")
    exp_p = e_prm[0] + xattn(e_prm[0], exp_i, "p2i")
    assert np.allclose(out_i.data[0], exp_i, atol=1e-12)
    assert np.allclose(out_p.data[0], exp_p, atol=1e-12)


def test_decode_mask_shape_constant_head_and_patch_blocks():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    img_tokens = Tensor(rand((1, 16, 16), seed=13))
    prm = Tensor(grid_prompt_tokens(cfg).copy())
    prm = expand(prm + store["grid/offset"], (1, 16, 16))

    logits = decode_mask(img_tokens, prm, store.leaves(), cfg)
    assert logits.shape == (1, 32, 32)
    # piecewise constant over each 8x8 patch footprint
    blocks = logits.data[0].reshape(4, 8, 4, 8)
    assert np.all(blocks == blocks[:, :1, :, :1])

    store.set_value("head/w2", np.zeros_like(store["head/w2"]))
    store.set_value("head/b2", np.full_like(store["head/b2"], 0.75))
    logits = decode_mask(img_tokens, prm, store.leaves(), cfg)
    assert np.all(logits.data == 0.75)


def test_grid_prompt_tokens_deterministic():
    cfg = tiny_config()
    a = grid_prompt_tokens(cfg)
    b = grid_prompt_tokens(cfg)
    assert np.array_equal(a, b)
    assert a.shape == (16, 16)


def test_forward_probability_range_and_determinism():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    img = np.random.default_rng(14).random((1, 32, 32))
    p1 = forward(img, store, cfg)
    p2 = forward(img, store, cfg)
    assert p1.shape == (32, 32)
    assert np.all((p1.data > 0) & (p1.data < 1))
    assert np.array_equal(p1.data, p2.data)


def test_forward_batched_matches_single():
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    imgs = np.random.default_rng(15).random((3, 1, 32, 32))
    batched = forward(imgs, store, cfg)
    assert batched.shape == (3, 32, 32)
    for i in range(3):
        single = forward(imgs[i], store, cfg)
        assert np.allclose(batched.data[i], single.data, atol=1e-12)


def test_count_params_empty_and_closed_form():
    assert count_params(ParameterStore()) == 0
    for cfg in (tiny_config(), BackboneConfig()):
        store = init_backbone(cfg, seed=0)
        assert count_params(store) == cfg.param_count()
        assert count_params(store, trainable_only=True) == cfg.param_count()
        store.freeze_all()
        assert count_params(store, trainable_only=True) == 0


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    store.set_trainable("embed/proj", False)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, meta=dict(cfg.to_meta(), note="x"))
    loaded, meta = load_checkpoint(path)
    assert loaded.names() == store.names()
    for name, value, trainable in store.items():
        assert np.array_equal(loaded[name], value)
        assert loaded[name].tobytes() == value.tobytes()
        assert loaded.is_trainable(name) == trainable
    assert BackboneConfig.from_meta(meta) == cfg
    assert meta["note"] == "x"
    # byte-identical on re-save
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(path2, loaded, meta=dict(cfg.to_meta(), note="x"))
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)
    cfg = tiny_config()
    store = init_backbone(cfg, seed=0)
    path = tmp_path / "ok.ckpt"
    save_checkpoint(path, store)
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(ValueError, match="payload"):
        load_checkpoint(truncated)
