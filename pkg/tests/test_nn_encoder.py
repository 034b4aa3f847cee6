"""Building blocks and encoder: unfold/replay oracles, init identities, freezing."""

import math

import numpy as np
import pytest
from scipy.special import erf

from aplseg import tensor as T
from aplseg.encoder import Encoder, EncoderConfig, MultiLevelFeatures, extract_hfc
from aplseg.errors import ConfigError, ShapeMismatch
from aplseg.nn import (CrossAttentionBlock, Linear, MultiHeadAttention,
                       TransformerBlock, map_to_tokens, tokens_to_map)
from aplseg.tensor import Tensor


def rand(shape, seed, scale=1.0):
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.normal(0.0, scale, size=shape)


def gen(seed):
    return np.random.Generator(np.random.Philox(seed))


SMALL = EncoderConfig(image_size=16, patch_size=8, embed_dim=16, num_layers=2,
                      num_heads=2, adapter_dim=4)


# -- numpy reference implementations (kept independent of the package ops) --------


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_attn(xq, xkv, P, pre, heads):
    q = xq @ P[f"{pre}.wq"]
    k = xkv @ P[f"{pre}.wk"]
    v = xkv @ P[f"{pre}.wv"]
    nq, c = q.shape
    hd = c // heads
    qh = q.reshape(nq, heads, hd).transpose(1, 0, 2)
    kh = k.reshape(-1, heads, hd).transpose(1, 0, 2)
    vh = v.reshape(-1, heads, hd).transpose(1, 0, 2)
    a = np_softmax(qh @ kh.transpose(0, 2, 1) / math.sqrt(hd))
    out = (a @ vh).transpose(1, 0, 2).reshape(nq, c)
    return out @ P[f"{pre}.wo"]


def np_block(x, P, pre, heads):
    h = np_ln(x, P[f"{pre}.ln1.gain"], P[f"{pre}.ln1.bias"])
    x = x + np_attn(h, h, P, f"{pre}.attn", heads)
    h = np_ln(x, P[f"{pre}.ln2.gain"], P[f"{pre}.ln2.bias"])
    h = np_gelu(h @ P[f"{pre}.mlp.fc1.w"] + P[f"{pre}.mlp.fc1.b"])
    return x + h @ P[f"{pre}.mlp.fc2.w"] + P[f"{pre}.mlp.fc2.b"]


def np_patchify(img2d, kernel):
    """Unfold + matmul patch projection; kernel (c, 1, p, p)."""
    c, _, p, _ = kernel.shape
    g = img2d.shape[0] // p
    flat = kernel.reshape(c, p * p)
    tokens = np.zeros((g * g, c))
    for i in range(g):
        for j in range(g):
            patch = img2d[i * p:(i + 1) * p, j * p:(j + 1) * p].reshape(-1)
            tokens[i * g + j] = flat @ patch
    return tokens


def np_hfc(img2d, ratio):
    spec = np.fft.fftshift(np.fft.fft2(img2d, norm="ortho"))
    h, w = img2d.shape
    iy = np.abs(np.arange(h) - h // 2)[:, None]
    ix = np.abs(np.arange(w) - w // 2)[None, :]
    spec[(iy < ratio * h / 2) & (ix < ratio * w / 2)] = 0
    return np.fft.ifft2(np.fft.ifftshift(spec), norm="ortho").real


# -- nn blocks ---------------------------------------------------------------------


def test_linear_forward_oracle():
    lin = Linear(5, 3, gen(1))
    x = rand((7, 5), 2)
    out = lin(Tensor(x)).data
    assert np.max(np.abs(out - (x @ lin.w.data + lin.b.data))) < 1e-12


def test_attention_rows_sum_to_one():
    mha = MultiHeadAttention(8, 2, gen(3), zero_out=False)
    x = Tensor(rand((6, 8), 4))
    mha(x, x, x)
    assert np.max(np.abs(mha.last_attn.sum(axis=-1) - 1.0)) < 1e-12
    assert mha.last_attn.shape == (2, 6, 6)


def test_attention_matches_numpy_reference():
    mha = MultiHeadAttention(8, 4, gen(5), zero_out=False)
    P = {f"a.{k}": v.data for k, v in mha.params().items()}
    xq = rand((3, 8), 6)
    xkv = rand((5, 8), 7)
    out = mha(Tensor(xq), Tensor(xkv), Tensor(xkv)).data
    assert np.max(np.abs(out - np_attn(xq, xkv, P, "a", 4))) < 1e-12


def test_attention_single_key_closed_form():
    # one key/value token: softmax over a single column is exactly 1, so the
    # pre-projection output is the value vector replicated per query row
    mha = MultiHeadAttention(6, 2, gen(8), zero_out=False)
    kv = rand((1, 6), 9)
    out = mha(Tensor(rand((4, 6), 10)), Tensor(kv), Tensor(kv)).data
    vrow = (kv @ mha.params()["wv"].data) @ mha.params()["wo"].data
    assert np.max(np.abs(out - np.tile(vrow, (4, 1)))) < 1e-12


def test_attention_projection_subsets():
    mha = MultiHeadAttention(8, 2, gen(11), project="qv", zero_out=False)
    names = set(mha.params())
    assert names == {"wq", "wv", "wo"}
    out = mha(Tensor(rand((3, 8), 12)), Tensor(rand((5, 8), 13)),
              Tensor(rand((5, 8), 13)))
    assert out.shape == (3, 8)


def test_transformer_block_identity_when_zeroed():
    blk = TransformerBlock(8, 2, gen(14), zero_out=True)
    x = rand((5, 8), 15)
    out = blk(Tensor(x)).data
    assert np.array_equal(out, x)


def test_cross_attention_identity_at_init():
    blk = CrossAttentionBlock(8, 2, gen(16), zero_out=True)
    x = rand((6, 8), 17)
    out = blk(Tensor(x), Tensor(rand((3, 8), 18))).data
    assert np.array_equal(out, x)


def test_block_gradients_flow_to_all_params():
    blk = TransformerBlock(8, 2, gen(19), zero_out=False)
    x = Tensor(rand((4, 8), 20))
    loss = blk(x).sum()
    params = blk.params()
    T.backward(loss, params=params.values())
    for name, p in params.items():
        assert p.grad is not None and p.grad.shape == p.data.shape, name
        assert np.any(p.grad != 0.0) or "bias" in name or name.endswith(".b"), name


def test_token_map_roundtrip():
    x = Tensor(rand((16, 4), 21))
    back = map_to_tokens(tokens_to_map(x, 4, 4))
    assert np.array_equal(back.data, x.data)


# -- config validation --------------------------------------------------------------


def test_config_defaults_and_taps():
    cfg = EncoderConfig()
    assert cfg.grid == 8
    assert cfg.level_layers == (3, 6, 9, 12)


@pytest.mark.parametrize("layers,taps", [
    (12, (3, 6, 9, 12)), (2, (1, 1, 2, 2)), (4, (1, 2, 3, 4)), (8, (2, 4, 6, 8)),
    (1, (1, 1, 1, 1)), (6, (2, 3, 5, 6)),
])
def test_level_tap_rule(layers, taps):
    cfg = EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=layers,
                        num_heads=2, adapter_dim=2)
    assert cfg.level_layers == taps


@pytest.mark.parametrize("kw", [
    {"image_size": 48},                       # not a power of two
    {"image_size": 64, "patch_size": 12},     # hits divisibility first
    {"embed_dim": 30},                        # heads don't divide
    {"num_layers": 0},
    {"adapter_dim": 0},
    {"hfc_ratio": 0.0},
    {"hfc_ratio": 1.0},
])
def test_config_rejects_invalid(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw)


# -- hfc wrapper ----------------------------------------------------------------------


def test_extract_hfc_constant_image_vanishes():
    img = Tensor(np.full((1, 16, 16), 0.6))
    assert np.max(np.abs(extract_hfc(img, 0.25).data)) < 1e-9


def test_extract_hfc_idempotent_and_linear():
    a = Tensor(rand((1, 16, 16), 30))
    b = Tensor(rand((1, 16, 16), 31))
    ha = extract_hfc(a, 0.25).data
    hb = extract_hfc(b, 0.25).data
    hab = extract_hfc(Tensor(a.data + b.data), 0.25).data
    assert np.max(np.abs(hab - (ha + hb))) < 1e-9
    again = extract_hfc(Tensor(ha), 0.25).data
    assert np.max(np.abs(again - ha)) < 1e-9


def test_extract_hfc_matches_numpy_reference():
    img = rand((1, 16, 16), 32)
    out = extract_hfc(Tensor(img), 0.25).data[0]
    assert np.max(np.abs(out - np_hfc(img[0], 0.25))) < 1e-12


def test_extract_hfc_rejects_bad_shape():
    with pytest.raises(ShapeMismatch):
        extract_hfc(Tensor(np.zeros((16, 16))), 0.25)


# -- encoder -----------------------------------------------------------------------


def test_patch_embed_unfold_oracle():
    enc = Encoder(SMALL, seed=7)
    img = rand((1, 16, 16), 33)
    out = enc.patch_embed(Tensor(img))
    assert out.shape == (16, 2, 2)
    ref = np_patchify(img[0], enc.backbone.patch.kernel.data) + enc.backbone.pos.data
    got = out.data.reshape(16, 4).T
    assert np.max(np.abs(got - ref)) < 1e-12


def test_patch_embed_zero_image_zero_pos():
    enc = Encoder(SMALL, seed=7)
    enc.backbone.pos.data[:] = 0.0
    out = enc.patch_embed(Tensor(np.zeros((1, 16, 16))))
    assert np.max(np.abs(out.data)) == 0.0


def test_token_grid_count():
    enc = Encoder(EncoderConfig(), seed=1)
    img = Tensor(rand((1, 64, 64), 34))
    assert enc.patch_embed(img).shape == (64, 8, 8)


def test_encode_rejects_wrong_size():
    enc = Encoder(SMALL, seed=7)
    with pytest.raises(ShapeMismatch):
        enc.encode(Tensor(np.zeros((1, 32, 32))))


def test_multilevel_features_validation():
    t = Tensor(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeMismatch):
        MultiLevelFeatures((t, t, t))
    with pytest.raises(ShapeMismatch):
        MultiLevelFeatures((t, t, t, Tensor(np.zeros((2, 2, 3)))))


def test_zero_init_identity_encode_equals_backbone():
    enc = Encoder(SMALL, seed=9)
    img = Tensor(rand((1, 16, 16), 35))
    with_ad = enc.encode(img)
    without = enc.backbone_forward(img)
    for a, b in zip(with_ad.levels, without.levels):
        assert np.max(np.abs(a.data - b.data)) < 1e-10


def test_adapter_forward_closed_form_oracle():
    enc = Encoder(SMALL, seed=9)
    # make the shared up-projection nonzero so the branch actually computes
    enc.adapter.up.w.data[:] = rand((4, 16), 36, scale=0.3)
    enc.adapter.up.b.data[:] = rand((16,), 37, scale=0.1)
    combined = rand((4, 16), 38)
    out = enc.adapter_forward(Tensor(combined), layer=1).data
    P = {k: v.data for k, v in enc.params().items()}
    ref = np_gelu(combined @ P["adapter.down01.w"] + P["adapter.down01.b"]) \
        @ P["adapter.up.w"] + P["adapter.up.b"]
    assert np.max(np.abs(out - ref)) < 1e-12


def test_encode_replay_oracle_two_layers():
    """Step-by-step numpy replay of the adapter-augmented stack."""
    enc = Encoder(SMALL, seed=11)
    enc.adapter.up.w.data[:] = rand((4, 16), 40, scale=0.5)
    enc.adapter.up.b.data[:] = rand((16,), 41, scale=0.2)
    img = rand((1, 16, 16), 42)
    got = enc.encode(Tensor(img))

    P = {k: v.data for k, v in enc.params().items()}
    e0 = np_patchify(img[0], P["backbone.patch.kernel"]) + P["backbone.pos"]
    hfc = np_hfc(img[0], SMALL.hfc_ratio)
    hfc_tok = np_patchify(hfc, P["adapter.hfc_conv.kernel"]) + P["adapter.hfc_conv.bias"]
    hfc_tok = hfc_tok @ P["adapter.hfc_lin.w"] + P["adapter.hfc_lin.b"]
    combined = hfc_tok + e0

    x = e0
    taps = {}
    for i in range(2):
        branch = np_gelu(combined @ P[f"adapter.down{i:02d}.w"] + P[f"adapter.down{i:02d}.b"])
        x = np_block(x + branch @ P["adapter.up.w"] + P["adapter.up.b"],
                     P, f"backbone.layer{i:02d}", SMALL.num_heads)
        taps[i + 1] = x

    # taps for 2 layers: levels 1,2 after layer 1; levels 3,4 after layer 2
    expect = [taps[1], taps[1], taps[2], taps[2]]
    for lv, ref in zip(got.levels, expect):
        assert np.max(np.abs(lv.data.reshape(16, 4).T - ref)) < 1e-10


def test_encode_deterministic():
    enc = Encoder(SMALL, seed=13)
    img = Tensor(rand((1, 16, 16), 43))
    a = enc.encode(img)
    b = enc.encode(img)
    for x, y in zip(a.levels, b.levels):
        assert np.array_equal(x.data, y.data)


def test_same_seed_same_backbone():
    a = Encoder(SMALL, seed=21)
    b = Encoder(SMALL, seed=21)
    assert a.backbone_hash() == b.backbone_hash()
    c = Encoder(SMALL, seed=22)
    assert a.backbone_hash() != c.backbone_hash()


def test_backbone_frozen_adapters_trainable():
    enc = Encoder(SMALL, seed=23)
    for name, p in enc.params().items():
        if name.startswith("backbone."):
            assert not p.requires_grad, name
        else:
            assert p.requires_grad, name


def test_backbone_hash_ignores_adapter_changes():
    enc = Encoder(SMALL, seed=25)
    before = enc.backbone_hash()
    enc.adapter.up.w.data[:] = 1.0
    enc.adapter.down[0].w.data[:] += 0.5
    assert enc.backbone_hash() == before


def test_gradients_reach_adapters_not_backbone():
    enc = Encoder(SMALL, seed=27)
    enc.adapter.up.w.data[:] = rand((4, 16), 44, scale=0.5)
    img = Tensor(rand((1, 16, 16), 45))
    out = enc.encode(img)
    loss = (out.levels[0] * out.levels[0]).sum()
    for lv in out.levels[1:]:
        loss = loss + (lv * lv).sum()
    T.backward(loss, params=enc.trainable_params().values())
    g = enc.adapter.down[0].w.grad
    assert g is not None and np.any(g != 0.0)
    assert enc.backbone.layers[0].attn._tensors["wq"].grad is None
