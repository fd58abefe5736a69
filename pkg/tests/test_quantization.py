from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridpim import quantization as qz
from hybridpim.quantization import QuantParams, calibrate, dequantize, quantize
from hybridpim.selection import ChannelAssignment

from oracles import quantized_conv_oracle, round_half_away_exact


def test_round_half_away():
    np.testing.assert_array_equal(qz.round_half_away([0.5, 1.5, -0.5, -1.5, 2.4, -2.6]), [1, 2, -1, -2, 2, -3])


def test_calibrate_unit_scale():
    qp = calibrate(np.array([0.0, 255.0]), 8)
    assert qp.s == 1 and qp.zp == 0
    assert quantize(100.0, qp) == 100


def test_calibrate_two_bit_hand_evaluation():
    qp = calibrate(np.array([-1.0, 1.0]), 2)
    assert quantize(np.array([1.0, -1.0, 0.0]), qp).tolist() == [3, 0, 2]


def test_constant_tensor():
    qp = calibrate(np.full(5, 2.5), 8)
    assert (qp.s, qp.zp) == (1.0, 2.5)
    assert not quantize(np.full(5, 2.5), qp).any()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=50), st.integers(2, 16))
def test_codes_in_range_and_half_step_bound(values, n):
    t = np.array(values)
    qp = calibrate(t, n)
    q = quantize(t, qp)
    assert q.min() >= 0 and q.max() <= qp.qmax
    if qp.hi > qp.lo:
        assert np.all(np.abs(dequantize(q, qp) - t) <= 0.5 / qp.s * (1 + 1e-9) + 1e-12 * np.abs(t))


def test_zero_codes_zero_output():
    qp = QuantParams(8, 1.0, 0.0, 0.0, 255.0)
    res = qz.quantized_conv(np.zeros((1, 4, 4, 2), np.int64), np.zeros((3, 3, 2, 2), np.int64), qp, qp, 1.0)
    assert not res.codes.any()


def test_scalar_1x1_hand_computation():
    qx = QuantParams(8, 2.0, 0.5, 0.25, 127.75)
    qw = QuantParams(8, 4.0, -3.0, -0.75, 63.0)
    res = qz.quantized_conv(np.array([[[[7]]]]), np.array([[[[9]]]]), qx, qw, 3.0)
    expect = round_half_away_exact(Fraction(3) / (Fraction(2) * Fraction(4)) * (7 + Fraction(1, 2)) * (9 - 3))
    assert res.codes.item() == expect


def _random_layer(rng):
    c, k, r = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 2, 3]))
    h = int(rng.integers(r, 6))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    nx, nw = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    qx = qz.params_from_range(float(rng.uniform(-3, 0)), float(rng.uniform(0.1, 3)), nx)
    qw = qz.params_from_range(float(rng.uniform(-1, 0)), float(rng.uniform(0.01, 1)), nw)
    x_q = rng.integers(0, qx.qmax + 1, size=(2, h, h, c))
    w_q = rng.integers(0, qw.qmax + 1, size=(r, r, c, k))
    return x_q, w_q, qx, qw, float(rng.uniform(0.5, 20)), stride, pad


@pytest.mark.parametrize("seed", range(10))
def test_quantized_conv_matches_big_integer_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        x_q, w_q, qx, qw, s_y, stride, pad = _random_layer(rng)
        res = qz.quantized_conv(x_q, w_q, qx, qw, s_y, stride, pad)
        np.testing.assert_array_equal(res.codes, quantized_conv_oracle(x_q, w_q, qx, qw, s_y, stride, pad))


def test_exact_guard_on_tie():
    # (x_q + zp_x)(w_q + zp_w) * s_y / (s_x s_w) lands exactly on .5
    qx = QuantParams(8, 1.0, 0.0, 0.0, 255.0)
    qw = QuantParams(8, 1.0, 0.0, 0.0, 255.0)
    res = qz.quantized_conv(np.array([[[[3]]]]), np.array([[[[1]]]]), qx, qw, 0.5)
    assert res.codes.item() == 2


def test_accumulator_width():
    assert qz.accumulator_bits(9, 8, 8) == 32
    assert qz.accumulator_bits(2**20, 16, 16) > 32
    with pytest.raises(qz.AccumulatorOverflow):
        qz.accumulator_bits(2**40, 16, 16)


def test_merge_order_sum_then_round_wins():
    rng = np.random.default_rng(0)
    y_d, y_a = rng.uniform(-50, 50, 100_000), rng.uniform(-50, 50, 100_000)
    s_y = 1.0
    truth = s_y * (y_d + y_a)
    once = np.abs(qz.merge_partials(y_d, y_a, s_y) - truth)
    twice = np.abs(qz.merge_partials(y_d, y_a, s_y, "round-then-sum") - truth)
    assert once.mean() <= twice.mean()
    assert once.max() <= 0.5 + 1e-12 and twice.max() <= 1.0 + 1e-12


def test_hybrid_identity_and_all_digital(tiny_net, tiny_splits):
    calib, ev = tiny_splits["calibration"], tiny_splits["evaluation"]
    uni = qz.calibrate_uniform(tiny_net, calib, 8)
    ref = qz.uniform_forward(tiny_net, uni, ev)
    rng = np.random.default_rng(0)
    masks = tuple(rng.random(c) < 0.5 for c in tiny_net.channel_counts())
    for a in (ChannelAssignment(masks), ChannelAssignment.all_analog(tiny_net)):
        shared = qz.calibrate_scheme(tiny_net, a, calib, 8, 8, shared=True)
        np.testing.assert_array_equal(qz.hybrid_forward(tiny_net, a, shared, ev), ref)
    dig = ChannelAssignment.all_digital(tiny_net)
    scheme = qz.calibrate_scheme(tiny_net, dig, calib, 6, 8)
    np.testing.assert_array_equal(qz.hybrid_forward(tiny_net, dig, scheme, ev), ref)


def test_six_bit_analog_small_drop(tiny_net, tiny_splits):
    calib, ev = tiny_splits["calibration"], tiny_splits["evaluation"]
    uni = qz.quantized_accuracy(qz.uniform_forward(tiny_net, qz.calibrate_uniform(tiny_net, calib, 8), ev), ev.labels)
    a = ChannelAssignment.all_analog(tiny_net).with_channels([(0, 0), (1, 3)])
    hyb = qz.quantized_accuracy(qz.hybrid_forward(tiny_net, a, qz.calibrate_scheme(tiny_net, a, calib), ev), ev.labels)
    assert uni - hyb <= 0.01


def test_fp16_accum_differs_only_slightly(tiny_net, tiny_splits):
    calib, ev = tiny_splits["calibration"], tiny_splits["evaluation"]
    a = ChannelAssignment.all_analog(tiny_net).with_channels([(1, 0)])
    scheme = qz.calibrate_scheme(tiny_net, a, calib)
    exact = qz.hybrid_forward(tiny_net, a, scheme, ev)
    half = qz.hybrid_forward(tiny_net, a, scheme, ev, "fp16")
    assert np.mean(np.argmax(exact, 1) == np.argmax(half, 1)) > 0.95
    with pytest.raises(ValueError):
        qz.hybrid_forward(tiny_net, a, scheme, ev, "bf16")


def test_cell_savings():
    assert qz.cell_savings(6, 2) == Fraction(4, 3)
    assert qz.cell_savings(8, 2) == 1
    assert qz.cell_savings(4, 2) == 2


def test_quantized_file_roundtrip(tmp_path, tiny_net, tiny_splits):
    a = ChannelAssignment.all_analog(tiny_net).with_channels([(1, 2)])
    scheme = qz.calibrate_scheme(tiny_net, a, tiny_splits["calibration"])
    qz.save_quantized(tmp_path / "q.hpim", tiny_net, scheme, a)
    back, arrays = qz.load_quantized(tmp_path / "q.hpim")
    assert back.to_dict() == scheme.to_dict()
    assert arrays["mask1"].sum() == tiny_net.weights_per_channel()[1]
