"""Mask decoder tests against straight-numpy replays and gradient checks."""

import numpy as np
import pytest
from scipy.special import erf

from aplseg import tensor as T
from aplseg.decoder import Decoder, predict_mask
from aplseg.encoder import MultiLevelFeatures
from aplseg.errors import ShapeMismatch
from aplseg.gradcheck import check_gradients
from aplseg.tensor import Tensor, backward

DIM = 8
HEADS = 2
GRID = 4
IMG = 8


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def np_ln(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + eps) + bias


def np_softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_attn(q_in, k_in, v_in, heads, wq, wv, wo):
    """Subset-projected attention: q and v are projected, k passes through."""
    n_q, dim = q_in.shape
    hd = dim // heads

    def split(x):
        return x.reshape(x.shape[0], heads, hd).transpose(1, 0, 2)

    q, k, v = split(q_in @ wq), split(k_in), split(v_in @ wv)
    attn = np_softmax(q @ k.transpose(0, 2, 1) / np.sqrt(hd))
    mixed = (attn @ v).transpose(1, 0, 2).reshape(n_q, dim)
    return mixed @ wo


def np_conv(x, kernel, bias, padding):
    c_out, c_in, k, _ = kernel.shape
    if padding == "same":
        pad = k // 2
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    _, h, w = x.shape
    out = np.zeros((c_out, h - k + 1, w - k + 1))
    for o in range(c_out):
        for i in range(c_in):
            for dy in range(k):
                for dx in range(k):
                    out[o] += kernel[o, i, dy, dx] * x[i, dy:dy + out.shape[1],
                                                       dx:dx + out.shape[2]]
        out[o] += bias[o]
    return out


def np_upsample(x, size):
    c, h, w = x.shape

    def coeffs(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        return i0, np.minimum(i0 + 1, n_in - 1), src - i0

    iy0, iy1, fy = coeffs(h, size)
    ix0, ix1, fx = coeffs(w, size)
    rows = x[:, iy0, :] * (1 - fy)[None, :, None] + x[:, iy1, :] * fy[None, :, None]
    return rows[:, :, ix0] * (1 - fx) + rows[:, :, ix1] * fx


def np_decoder(params, prompted, raw, mask, heads, image_size, single=False):
    outs = []
    levels = [("level3", 3)] if single else [(f"level{j}", j) for j in range(4)]
    for name, j in levels:
        p = {k[len(name) + 1:]: v for k, v in params.items() if k.startswith(name + ".")}
        c, h, w = raw[j].shape
        gated = raw[j].reshape(c, h * w).T * mask.reshape(-1)[:, None]
        keys = gated @ p["gate.w"]
        q = prompted[j].reshape(c, h * w).T
        x = q + np_attn(q, keys, keys, heads, p["attn.wq"], p["attn.wv"], p["attn.wo"])
        ln = np_ln(x, p["ln.gain"], p["ln.bias"])
        x = x + np_gelu(ln @ p["mlp.fc1.w"] + p["mlp.fc1.b"]) @ p["mlp.fc2.w"] + p["mlp.fc2.b"]
        outs.append(x.T.reshape(c, h, w))
    head = "single_head" if single else "head"
    hp = {k[len(head) + 1:]: v for k, v in params.items() if k.startswith(head + ".")}
    y = np.concatenate(outs, axis=0)
    y = np_gelu(np_conv(y, hp["conv1.kernel"], hp["conv1.bias"], "valid"))
    y = np_gelu(np_conv(y, hp["conv2.kernel"], hp["conv2.bias"], "same"))
    y = np_conv(y, hp["conv3.kernel"], hp["conv3.bias"], "valid")
    return np_upsample(y, image_size)


def make_inputs(seed=0, grid=GRID, dim=DIM):
    rng = np.random.default_rng(seed)
    prompted = MultiLevelFeatures(tuple(
        Tensor(rng.normal(size=(dim, grid, grid))) for _ in range(4)))
    raw = MultiLevelFeatures(tuple(
        Tensor(rng.normal(size=(dim, grid, grid))) for _ in range(4)))
    mask = (rng.random((grid, grid)) < 0.6).astype(np.float64)
    mask[0, 0] = 1.0  # keep at least one key alive
    return prompted, raw, mask


def randomize(dec, seed=1):
    rng = np.random.default_rng(seed)
    for p in dec.params().values():
        p.data = rng.normal(0.0, 0.3, size=p.data.shape)


class TestGate:
    def test_matches_mask_then_project(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0))
        randomize(dec)
        _, raw, mask = make_inputs()
        block = dec.blocks[1]
        got = dec.gate_level(block, raw.levels[1], mask)
        tokens = raw.levels[1].data.reshape(DIM, -1).T
        want = (tokens * mask.reshape(-1)[:, None]) @ block.gate.w.data
        assert np.allclose(got.data, want, atol=1e-12, rtol=0)

    def test_background_rows_are_zero(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0))
        randomize(dec)
        _, raw, _ = make_inputs()
        mask = np.zeros((GRID, GRID))
        mask[2, 3] = 1.0
        got = dec.gate_level(dec.blocks[0], raw.levels[0], mask).data
        keep = 2 * GRID + 3
        assert np.all(got[np.arange(GRID * GRID) != keep] == 0.0)
        assert np.any(got[keep] != 0.0)

    def test_mask_grid_mismatch(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0))
        _, raw, _ = make_inputs()
        with pytest.raises(ShapeMismatch):
            dec.gate_level(dec.blocks[0], raw.levels[0], np.ones((GRID, GRID + 1)))


class TestInitBehavior:
    def test_level_block_is_identity_at_init(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(3))
        prompted, raw, mask = make_inputs()
        block = dec.blocks[2]
        gated = dec.gate_level(block, raw.levels[2], mask)
        out = dec.level_block(block, prompted.levels[2], gated)
        assert np.array_equal(out.data, prompted.levels[2].data)

    def test_fresh_decoder_emits_zero_logits(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(3))
        prompted, raw, mask = make_inputs()
        out = dec(prompted, raw, mask)
        assert out.shape == (1, IMG, IMG)
        assert np.all(out.data == 0.0)


class TestReplayOracle:
    @pytest.mark.parametrize("single", [False, True])
    def test_randomized_decoder_matches_numpy(self, single):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(5), single_level=single)
        randomize(dec, seed=7)
        prompted, raw, mask = make_inputs(seed=11)
        got = dec(prompted, raw, mask)
        params = {k: v.data for k, v in dec.params().items()}
        want = np_decoder(params, [l.data for l in prompted.levels],
                          [l.data for l in raw.levels], mask, HEADS, IMG,
                          single=single)
        assert got.shape == (1, IMG, IMG)
        assert np.max(np.abs(got.data - want)) < 1e-10

    def test_upsample_reaches_image_resolution(self):
        dec = Decoder(DIM, HEADS, 32, np.random.default_rng(5))
        randomize(dec)
        prompted, raw, mask = make_inputs()
        assert dec(prompted, raw, mask).shape == (1, 32, 32)


class TestVariants:
    def test_single_level_parameter_names(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0), single_level=True)
        names = set(dec.params())
        assert any(n.startswith("level3.") for n in names)
        assert any(n.startswith("single_head.") for n in names)
        assert not any(n.startswith("level0.") for n in names)
        assert not any(n.startswith("head.") for n in names)

    def test_single_level_ignores_shallow_levels(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0), single_level=True)
        randomize(dec)
        prompted, raw, mask = make_inputs()
        base = dec(prompted, raw, mask).data.copy()
        bumped = [l.data.copy() for l in prompted.levels]
        bumped[0] = bumped[0] + 5.0
        prompted2 = MultiLevelFeatures(tuple(Tensor(b) for b in bumped))
        assert np.array_equal(dec(prompted2, raw, mask).data, base)

    def test_mlmd_uses_shallow_levels(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0))
        randomize(dec)
        prompted, raw, mask = make_inputs()
        base = dec(prompted, raw, mask).data.copy()
        bumped = [l.data.copy() for l in prompted.levels]
        bumped[0] = bumped[0] + 5.0
        prompted2 = MultiLevelFeatures(tuple(Tensor(b) for b in bumped))
        assert not np.array_equal(dec(prompted2, raw, mask).data, base)

    def test_fuse_rejects_wrong_level_count(self):
        dec = Decoder(DIM, HEADS, IMG, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            dec.fuse_and_classify([Tensor(np.zeros((DIM, GRID, GRID)))] * 3)


class TestGradients:
    def test_decoder_parameters_check_against_finite_differences(self):
        dec = Decoder(4, 2, 4, np.random.default_rng(2))
        randomize(dec, seed=3)
        rng = np.random.default_rng(9)
        prompted = MultiLevelFeatures(tuple(
            Tensor(rng.normal(size=(4, 2, 2))) for _ in range(4)))
        raw = MultiLevelFeatures(tuple(
            Tensor(rng.normal(size=(4, 2, 2))) for _ in range(4)))
        mask = np.array([[1.0, 0.0], [1.0, 1.0]])
        params = dec.trainable_params()

        def loss_fn():
            out = dec(prompted, raw, mask)
            return float(T.total(T.mul(out, out)).data)

        out = dec(prompted, raw, mask)
        loss = T.total(T.mul(out, out))
        for p in params.values():
            p.grad = None
        backward(loss, params=params.values())
        grads = {k: p.grad for k, p in params.items()}
        report = check_gradients(loss_fn, params, grads, samples_per_param=2, seed=0)
        assert max(report.values()) < 1e-4, report


class TestPredictMask:
    def test_threshold_is_strict(self):
        logits = Tensor(np.zeros((1, 3, 3)))  # sigmoid(0) == 0.5 exactly
        assert np.all(predict_mask(logits, threshold=0.5) == 0.0)

    def test_positive_and_negative_logits(self):
        logits = Tensor(np.array([[2.0, -2.0], [0.1, -0.1]]))
        assert np.array_equal(predict_mask(logits),
                              np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_accepts_both_layouts(self):
        flat = np.array([[1.0, -1.0]])
        assert np.array_equal(predict_mask(Tensor(flat)),
                              predict_mask(Tensor(flat[None])))

    def test_rejects_other_ranks(self):
        with pytest.raises(ShapeMismatch):
            predict_mask(Tensor(np.zeros(4)))
