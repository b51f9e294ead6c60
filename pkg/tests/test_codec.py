import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlfsq import nn
from rlfsq.codec import (Codec, CodecConfig, ConvNeXtBlock, DownBlock, UpBlock, pad_to_multiple,
                         read_metadata)
from rlfsq.train import stage1_loss_and_grad

TINY = CodecConfig(n_mels=6, base_channels=4, seed=3)


def zero_convs(module):
    for m in _walk(module):
        if isinstance(m, (nn.DepthwiseConv, nn.StridedConv, nn.TransposedConv)):
            m.weight.value[...] = 0.0


def _walk(m):
    yield m
    for v in vars(m).values():
        items = v if isinstance(v, (list, tuple)) else [v]
        for it in items:
            if isinstance(it, nn.Module):
                yield from _walk(it)


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.value[...] = rng.normal(scale=scale, size=p.shape)


@pytest.fixture(scope="module")
def model():
    return Codec(CodecConfig(n_mels=16, base_channels=8))


def test_encode_frame_counts(model):
    rng = np.random.default_rng(0)
    assert model.encode_mel(rng.normal(size=(512, 16))).shape == (64, 2)
    assert model.encode_mel(rng.normal(size=(100, 16))).shape == (13, 2)
    assert pad_to_multiple(np.zeros((100, 3))).shape == (104, 3)


@given(st.integers(1, 70))
@settings(max_examples=25, deadline=None)
def test_shape_law(t):
    m = Codec(TINY)
    mel = np.random.default_rng(t).normal(size=(t, 6))
    codes = m.encode_mel(mel)
    assert codes.shape == (-(-t // 8), 2)
    assert np.all((codes >= 0) & (codes < 4096))
    assert m.decode_codes(codes).shape == (8 * codes.shape[0], 6)
    assert m.reconstruct(mel).shape == mel.shape


def test_decode_shape(model):
    codes = np.random.default_rng(1).integers(0, 4096, size=(64, 2))
    assert model.decode_codes(codes).shape == (512, 16)


def test_constant_input_zero_convs_gives_constant_latent():
    m = Codec(TINY)
    zero_convs(m)
    x = np.full((1, 6, 32), -3.0)
    z = m.encoder.forward(x)
    assert z.shape == (1, 4, 4)
    assert np.allclose(z, z[:, :, :1], atol=1e-12)


def test_zero_latent_zero_convs_finite():
    m = Codec(TINY)
    zero_convs(m)
    out = m.decode_values(np.zeros((1, 5, 4)))
    assert out.shape == (1, 6, 40) and np.all(np.isfinite(out))


def test_down_block_is_shortcut_with_zero_conv():
    rng = np.random.default_rng(0)
    blk = DownBlock(3, rng)
    blk.conv.weight.value[...] = 0.0
    x = rng.normal(size=(2, 3, 8))
    expected = np.concatenate([0.5 * (x[:, :, ::2] + x[:, :, 1::2])] * 2, axis=1)
    assert np.array_equal(blk.forward(x), expected)
    with pytest.raises(ValueError):
        blk.forward(rng.normal(size=(2, 3, 7)))


def test_up_block_is_shortcut_with_zero_conv():
    rng = np.random.default_rng(1)
    blk = UpBlock(4, rng)
    blk.conv.weight.value[...] = 0.0
    x = rng.normal(size=(2, 4, 3))
    expected = np.repeat(0.5 * (x[:, :2] + x[:, 2:]), 2, axis=2)
    assert np.array_equal(blk.forward(x), expected)


def test_up_of_down_preserves_constant():
    rng = np.random.default_rng(2)
    down, up = DownBlock(2, rng), UpBlock(4, rng)
    down.conv.weight.value[...] = 0.0
    up.conv.weight.value[...] = 0.0
    x = np.full((1, 2, 4), 1.75)
    assert np.array_equal(up.forward(down.forward(x)), x)


@pytest.mark.parametrize("kind", ["convnext", "convnext_nogrn", "down", "up"])
def test_block_gradients(kind):
    rng = np.random.default_rng(4)
    if kind.startswith("convnext"):
        blk, shape = ConvNeXtBlock(3, rng, 7, use_grn=kind == "convnext"), (2, 3, 9)
    elif kind == "down":
        blk, shape = DownBlock(3, rng), (2, 3, 8)
    else:
        blk, shape = UpBlock(4, rng), (2, 4, 5)
    randomize(blk, rng)
    x = rng.normal(size=shape)
    proj = rng.normal(size=blk.forward(x).shape)
    f = lambda: float((blk.forward(x) * proj).sum())
    blk.zero_grad()
    blk.forward(x)
    dx = blk.backward(proj)
    assert nn.grad_error(dx, nn.numerical_grad(f, x)) < 1e-4
    for name, p in blk.named_parameters().items():
        g = p.grad.copy()
        assert nn.grad_error(g, nn.numerical_grad(f, p.value)) < 1e-4, name


def test_stage1_loss_gradient_matches_finite_differences():
    """Straight-through contract: the oracle holds the quantization offset fixed."""
    m = Codec(TINY)
    rng = np.random.default_rng(5)
    randomize(m, rng, scale=0.3)
    x = rng.normal(size=(2, 6, 16))
    fwd = m.forward(x)
    offset = fwd.quant.value - fwd.quant.bounded
    m.zero_grad()
    stage1_loss_and_grad(m, x, 15.0)

    def f():
        out = m.forward(x, ste_offset=offset)
        return 15.0 * float(np.mean(np.abs(out.recon - x)))

    for name, p in m.named_parameters().items():
        g = p.grad.copy()
        err = nn.grad_error(g, nn.numerical_grad(f, p.value))
        assert err < 1e-4, (name, err)


def test_checkpoint_and_metadata_roundtrip(tmp_path, model):
    path = tmp_path / "codec.ck"
    model.save(path, original_frames=100)
    cfg, original = read_metadata(tmp_path / "codec.ck.meta")
    assert cfg == model.cfg and original == 100
    loaded = Codec.load(path)
    probe = np.random.default_rng(6).normal(size=(3, 16, 24))
    a, b = model.forward(probe), loaded.forward(probe)
    assert np.array_equal(a.recon, b.recon)
    assert np.array_equal(a.quant.codes, b.quant.codes)


def test_group_params_and_hash(model):
    assert set(model.group_params("quantizer")) == set()
    assert all(k.startswith("encoder.") for k in model.group_params("encoder"))
    assert all(k.startswith("decoder.") for k in model.group_params("decoder"))
    h = model.group_hash("decoder")
    assert h == model.group_hash("decoder")
    with pytest.raises(KeyError):
        model.group_params("vocoder")
