import numpy as np
import pytest

from mxtrain.codec import Rounding, ScaleRule, quantize_block
from mxtrain.mx_linear import (
    Axis,
    AxisContractError,
    GradPath,
    LinearQuantConfig,
    QuantizerMask,
    TapeMismatchError,
    backward,
    backward_microscaling,
    backward_tetrajet,
    dequantize_matrix,
    forward,
    from_groups,
    group_lengths,
    mx_matmul,
    quantize_matrix,
    ste_reference_grad,
    to_groups,
)
from mxtrain.rng import StreamKey

GRAD_OFF = QuantizerMask.only(1, 2)


def _layer(rng, n=8, d=40, c=36):
    return rng.normal(size=(n, d)), rng.normal(size=(c, d)) * 0.1, rng.normal(size=(n, c))


@pytest.mark.parametrize("shape", [(1, 1), (3, 32), (5, 33), (64, 70), (31, 2)])
@pytest.mark.parametrize("axis", list(Axis))
def test_groups_round_trip(rng, shape, axis):
    m = rng.normal(size=shape)
    g = to_groups(m, axis)
    lengths = group_lengths(shape, axis)
    assert g.shape == (len(lengths), 32)
    np.testing.assert_array_equal(from_groups(g, shape, axis), m)
    pad = np.arange(32)[None, :] >= lengths[:, None]
    assert np.all(g[pad] == 0)


def test_row_and_column_groups_match_block_quantizer(rng):
    m = rng.normal(size=(40, 35))
    rows = quantize_matrix(m, Axis.ROW_GROUPS)
    b = quantize_block(m[2, 32:35])
    assert rows.block(2 * 2 + 1) == b
    cols = quantize_matrix(m, Axis.COL_GROUPS)
    b = quantize_block(m[32:40, 7])
    assert cols.block(35 + 7) == b


def test_column_quantization_is_row_quantization_of_transpose(rng):
    m = rng.normal(size=(45, 19))
    a = dequantize_matrix(quantize_matrix(m, Axis.COL_GROUPS))
    b = dequantize_matrix(quantize_matrix(m.T, Axis.ROW_GROUPS))
    np.testing.assert_array_equal(a, b.T)


def test_axis_contract(rng):
    a = rng.normal(size=(4, 32))
    b = rng.normal(size=(32, 4))
    qa_row = quantize_matrix(a, Axis.ROW_GROUPS)
    qb_col = quantize_matrix(b, Axis.COL_GROUPS)
    np.testing.assert_array_equal(
        mx_matmul(qa_row, qb_col), dequantize_matrix(qa_row) @ dequantize_matrix(qb_col)
    )
    with pytest.raises(AxisContractError):
        mx_matmul(quantize_matrix(a, Axis.COL_GROUPS), qb_col)
    with pytest.raises(AxisContractError):
        mx_matmul(qa_row, quantize_matrix(b, Axis.ROW_GROUPS))
    with pytest.raises(AxisContractError):
        mx_matmul(a, qb_col)


def test_masked_layer_is_dense(rng):
    x, w, g = _layer(rng)
    y, tapes = forward(x, w, QuantizerMask.all_off())
    np.testing.assert_array_equal(y, x @ np.ascontiguousarray(w.T))
    gx, gw = backward(g, tapes)
    np.testing.assert_array_equal(gx, g @ w)
    np.testing.assert_array_equal(gw, np.ascontiguousarray(g.T) @ x)


def test_forward_operands_are_on_grid(rng):
    x, w, _ = _layer(rng)
    y, tapes = forward(x, w)
    assert tapes.x_q.axis == Axis.ROW_GROUPS and tapes.wt_q.axis == Axis.COL_GROUPS
    np.testing.assert_array_equal(y, dequantize_matrix(tapes.x_q) @ dequantize_matrix(tapes.wt_q))


def test_gradient_quantizers_off_matches_ste_bit_exact(rng):
    for i in range(20):
        x, w, g = _layer(rng, n=int(rng.integers(1, 20)), d=int(rng.integers(1, 70)), c=int(rng.integers(1, 70)))
        _, tapes = forward(x, w, GRAD_OFF, step=i)
        got = backward_tetrajet(g, tapes, key=StreamKey(0, 0, i))
        want = ste_reference_grad(g, tapes)
        np.testing.assert_array_equal(got[0], want[0])
        np.testing.assert_array_equal(got[1], want[1])


def test_backward_is_deterministic_per_key(rng):
    x, w, g = _layer(rng)
    _, tapes = forward(x, w, step=3)
    a = backward(g, tapes, key=StreamKey(5, 0, 3))
    b = backward(g, tapes, key=StreamKey(5, 0, 3))
    c = backward(g, tapes, key=StreamKey(6, 0, 3))
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_tetrajet_backward_unbiased_small(rng):
    x, w, g = _layer(rng, n=4, d=33, c=34)
    _, tapes = forward(x, w)
    want_x, want_w = ste_reference_grad(g, tapes)
    n = 400
    draws = [backward_tetrajet(g, tapes, key=StreamKey(s, 0, 0)) for s in range(n)]
    for k, want in ((0, want_x), (1, want_w)):
        d = np.stack([dr[k] for dr in draws])
        sem = d.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(d.mean(axis=0) - want) <= 5 * sem + 1e-12)


def test_tape_mismatch(rng):
    x, w, g = _layer(rng)
    _, tapes = forward(x, w, step=2)
    with pytest.raises(TapeMismatchError):
        backward_tetrajet(g[:, :-1], tapes, key=StreamKey(0, 0, 2))
    with pytest.raises(TapeMismatchError):
        backward_tetrajet(g, tapes, key=StreamKey(0, 0, 3))
    with pytest.raises(TapeMismatchError):
        backward_tetrajet(g, object())
    with pytest.raises(ValueError, match="StreamKey"):
        backward_tetrajet(g, tapes)


def test_forward_rejects_bad_input(rng):
    x, w, _ = _layer(rng)
    with pytest.raises(ValueError):
        forward(x, w[:, :-1])
    x[0, 0] = np.nan
    with pytest.raises(ValueError):
        forward(x, w)


def test_microscaling_path_needs_masters(rng):
    x, w, g = _layer(rng)
    cfg = LinearQuantConfig.microscaling()
    _, tapes = forward(x, w, cfg=cfg)
    assert tapes.x is not None
    a = backward(g, tapes, cfg)
    b = backward_microscaling(g, x, w)
    np.testing.assert_array_equal(a[0], b[0])
    _, plain = forward(x, w)
    with pytest.raises(TapeMismatchError):
        backward(g, plain, cfg)


def test_bias_witness_weight_requantization():
    """Q4 applied to the master W differs from the transposed forward Q2 operand."""
    rng = np.random.default_rng(7)
    x, w, g = rng.normal(size=(16, 64)), rng.normal(size=(48, 64)), rng.normal(size=(16, 48))
    mask = QuantizerMask.only(1, 2, 4)
    _, tapes = forward(x, w, mask, LinearQuantConfig.microscaling())
    want, _ = ste_reference_grad(g, tapes)
    got, _ = backward_microscaling(g, x, w, mask)
    rel = np.linalg.norm(got - want) / np.linalg.norm(want)
    assert rel > 1e-3
    # the double-quantization path stays on the forward tape: Q4 of an on-grid
    # operand with deterministic rounding reproduces it when the scales agree
    det = LinearQuantConfig(backward_rounding=Rounding.DETERMINISTIC, grad_path=GradPath.DOUBLE_QUANTIZATION)
    _, tapes_tf = forward(x, w, mask, det)
    got_tf, _ = backward_tetrajet(g, tapes_tf, det)
    want_tf, _ = ste_reference_grad(g, tapes_tf)
    assert np.linalg.norm(got_tf - want_tf) / np.linalg.norm(want_tf) < rel


def test_scale_rule_reaches_layer(rng):
    x, w, _ = _layer(rng)
    tf, _ = forward(x * 31, w)
    mx, _ = forward(x * 31, w, cfg=LinearQuantConfig(scale_rule=ScaleRule.MICROSCALING))
    assert not np.array_equal(tf, mx)
