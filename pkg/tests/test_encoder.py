import math

import numpy as np
import pytest
import torch

from lorasmc.encoder import (CausalConvEncoder, CausalConvSpec, LOGVAR_OFFSET, encode, encoder_state,
                             load_encoder_state)
from lorasmc.errors import ShapeError


def test_receptive_field():
    assert CausalConvSpec(5, (21, 11, 1), (8, 8, 2)).receptive_field == 31
    assert CausalConvSpec(5, (1,), (2,)).receptive_field == 1


def test_output_shapes(rng):
    enc = CausalConvEncoder(CausalConvSpec(5, (4, 3, 1), (6, 6, 3)), rng)
    m, lv = encode(enc, rng.normal(size=(2, 17, 5)))
    assert m.shape == lv.shape == (2, 17, 3)
    m1, _ = encode(enc, rng.normal(size=(17, 5)))
    assert m1.shape == (17, 3)


def test_wrong_channel_count(rng):
    enc = CausalConvEncoder(CausalConvSpec(5, (3, 1), (4, 2)), rng)
    with pytest.raises(ShapeError):
        encode(enc, np.zeros((10, 4)))


def test_bad_spec():
    with pytest.raises(ShapeError):
        CausalConvSpec(3, (3, 1), (4,))
    with pytest.raises(ValueError):
        CausalConvSpec(3, (3,), (2,), padding="same")


def test_zero_weights_give_prior_variance(rng):
    enc = CausalConvEncoder(CausalConvSpec(4, (3, 2, 1), (5, 5, 2)), rng)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
        enc.logvar_head.bias.fill_(LOGVAR_OFFSET)
    m, lv = encode(enc, rng.normal(size=(12, 4)))
    np.testing.assert_array_equal(m, 0.0)
    np.testing.assert_allclose(np.exp(lv), 0.01, rtol=1e-14)


def test_init_bounds():
    enc = CausalConvEncoder(CausalConvSpec(7, (5, 3, 1), (16, 12, 2)), np.random.default_rng(0))
    for conv in list(enc.hidden) + [enc.mean_head]:
        bound = 1 / math.sqrt(conv.in_channels * conv.kernel_size[0])
        assert conv.weight.abs().max().item() <= bound
        assert conv.bias.abs().max().item() <= bound
    b = 1 / math.sqrt(12)
    off = enc.logvar_head.bias - LOGVAR_OFFSET
    assert off.abs().max().item() <= b + 1e-12


def test_init_statistics():
    # many weights: uniform(-b, b) has mean 0 and variance b^2 / 3
    enc = CausalConvEncoder(CausalConvSpec(40, (9, 1), (64, 2)), np.random.default_rng(1))
    w = enc.hidden[0].weight.detach().numpy().ravel()
    b = 1 / math.sqrt(40 * 9)
    se = b / math.sqrt(3 * w.size)
    assert abs(w.mean()) < 4 * se
    assert w.var() == pytest.approx(b * b / 3, rel=0.02)


def test_init_reproducible():
    a = CausalConvEncoder(CausalConvSpec(3, (3, 1), (4, 2)), np.random.default_rng(9))
    b = CausalConvEncoder(CausalConvSpec(3, (3, 1), (4, 2)), np.random.default_rng(9))
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_causal_under_zero_padding(rng):
    spec = CausalConvSpec(3, (5, 4, 2), (6, 6, 2), padding="zero")
    enc = CausalConvEncoder(spec, rng)
    y = rng.normal(size=(30, 3))
    m0, lv0 = encode(enc, y)
    for t in range(0, 30, 3):
        y2 = y.copy()
        y2[t + 1:] += rng.normal(size=y2[t + 1:].shape) * 5
        m1, lv1 = encode(enc, y2)
        np.testing.assert_array_equal(m1[:t + 1], m0[:t + 1])
        np.testing.assert_array_equal(lv1[:t + 1], lv0[:t + 1])


def test_output_depends_on_full_window(rng):
    spec = CausalConvSpec(2, (3, 2), (4, 1))
    enc = CausalConvEncoder(spec, rng)
    y = rng.normal(size=(20, 2))
    m0, _ = encode(enc, y)
    t = 15
    y2 = y.copy()
    y2[t - spec.receptive_field + 1] += 1.0
    assert encode(enc, y2)[0][t] != m0[t]
    y3 = y.copy()
    y3[t - spec.receptive_field] += 1.0
    assert encode(enc, y3)[0][t] == m0[t]


@pytest.mark.parametrize("mode", ["circular", "reflect"])
def test_wrapping_modes_causal_after_warmup(rng, mode):
    spec = CausalConvSpec(2, (4, 3), (3, 2), padding=mode)
    enc = CausalConvEncoder(spec, rng)
    y = rng.normal(size=(25, 2))
    m0, _ = encode(enc, y)
    y2 = y.copy()
    y2[-1] += 3.0
    m1, _ = encode(enc, y2)
    start = spec.receptive_field - 1
    np.testing.assert_array_equal(m1[start:-1], m0[start:-1])


def test_state_roundtrip(rng):
    spec = CausalConvSpec(3, (3, 1), (4, 2))
    a = CausalConvEncoder(spec, rng)
    b = load_encoder_state(CausalConvEncoder(spec), encoder_state(a))
    y = rng.normal(size=(9, 3))
    np.testing.assert_array_equal(encode(a, y)[0], encode(b, y)[0])
