# test_pe.py
# MAC modes, nibble fusion, FP32 accumulation and the tiled GEMMs

from fractions import Fraction
from functools import reduce

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import oracle_group_dot
from models.errors import InvalidArgumentError, InvalidValueError, InvariantViolationError, ShapeError
from models.grouping import GroupedOperand, group_tensor
from models.numerics import BfpBlock, BfpConfig, BfpGroup, convert_group
from models.pe import (
    MacMode,
    PartialSum,
    WeightGroup,
    accumulate,
    fused_integer_dots,
    gemm,
    gemm_bfp,
    integer_dots,
    mac_m8m4,
    mac_m8m8,
    mac_m8w4,
    mode_for,
    quantize_weights,
    round_to_half,
    scale_and_accumulate,
)

CFG = BfpConfig(32, 8)


def _operand(x, cfg=CFG):
    return group_tensor(x, "token", cfg).as_operand()


def test_quantize_weights_example():
    weights = quantize_weights([7.0, -7.0, 3.5, 0.0], group_size=4)
    assert weights.scales.tolist() == [[1.0]]
    assert weights.q[:, 0].tolist() == [7, -7, 4, 0]


def test_quantize_weights_all_zero():
    weights = quantize_weights(np.zeros(8), group_size=8)
    assert weights.scales.tolist() == [[1.0]]
    assert not weights.q.any()


def test_quantize_weights_error_bound(rng):
    w = rng.normal(size=(300, 5))
    weights = quantize_weights(w, group_size=128)
    assert weights.scales.shape == (3, 5)
    per_row = np.repeat(weights.scales, 128, axis=0)[:300]
    assert np.all(np.abs(weights.dequantize() - w) <= per_row / 2)


def test_quantize_weights_rejects_non_finite():
    with pytest.raises(InvalidValueError):
        quantize_weights([1.0, np.nan])


def test_mac_m8w4_example():
    a = BfpGroup(0, [1, 1, -1, 1], [128, 64, 32, 0], 8)
    partial = mac_m8w4(a, WeightGroup([3, -2, 1, 7], 0.5))
    assert partial == PartialSum(0.875, False)


def test_mac_m8w4_zero_weights(rng):
    a = convert_group(rng.normal(size=32), CFG)
    assert mac_m8w4(a, WeightGroup(np.zeros(32), 1.0)).value == 0.0


def test_mac_m8m4_example():
    a = BfpGroup(0, [1, 1], [128, 64], 8)
    b = BfpGroup(1, [1, -1], [8, 4], 4)
    assert mac_m8m4(a, b).value == 1.5
    assert mac_m8m4(a, BfpGroup(1, [1, 1], [0, 0], 4)).value == 0.0


def test_mac_m8m4_rejects_wide_b():
    a = BfpGroup(0, [1], [128], 8)
    with pytest.raises(InvalidArgumentError):
        mac_m8m4(a, BfpGroup(0, [1], [200], 8))


def test_mac_length_mismatch():
    with pytest.raises(ShapeError):
        mac_m8m8(BfpGroup(0, [1, 1], [1, 2], 8), BfpGroup(0, [1], [1], 8))


def test_mac_m8m8_single_lane():
    partial = mac_m8m8(BfpGroup(7, [1], [100], 8), BfpGroup(7, [-1], [51], 8))
    assert partial.value == -5100.0


def test_nibble_fusion_exhaustive():
    mags = np.arange(256)
    signs = np.repeat([1, -1], 256).astype(np.int8)
    block = BfpBlock(np.zeros(512, dtype=np.int64), signs[:, None], np.tile(mags, 2)[:, None], 8)
    operand = GroupedOperand([block])
    fused = fused_integer_dots(operand, operand)[0]
    values = signs.astype(np.int64) * np.tile(mags, 2)
    assert np.array_equal(fused, np.outer(values, values))
    assert np.array_equal(fused, integer_dots(operand, operand)[0])


def test_mac_m8m8_matches_rational_oracle(rng):
    for _ in range(200):
        a = convert_group(rng.normal(size=32), CFG)
        b = convert_group(rng.normal(size=32), CFG)
        expected = float(np.float16(float(oracle_group_dot(a, b))))
        assert mac_m8m8(a, b).value == expected


def test_mac_m8m4_matches_rational_oracle(rng):
    for _ in range(200):
        a = convert_group(rng.normal(size=32), CFG)
        b = convert_group(rng.normal(size=32), BfpConfig(32, 4))
        assert mac_m8m4(a, b).value == float(np.float16(float(oracle_group_dot(a, b))))


activations = st.lists(st.floats(-100.0, 100.0, width=16), min_size=32, max_size=32)
int4_slices = st.lists(st.integers(-8, 7), min_size=32, max_size=32)
half_groups = st.lists(st.floats(width=16, allow_nan=False, allow_infinity=False), min_size=32, max_size=32)


@given(values=activations, q=int4_slices, scale=st.floats(2.0 ** -10, 1.0, width=16))
@settings(max_examples=200, deadline=None)
def test_mac_m8w4_matches_rational_oracle(values, q, scale):
    a = convert_group(values, CFG)
    exact = (Fraction(int(np.dot(a.signed(), q))) * Fraction(2) ** (int(a.shared_exponent) - 7)
             * Fraction(scale))
    partial = mac_m8w4(a, WeightGroup(q, scale))
    assert partial.value == float(np.float16(float(exact)))
    assert not partial.overflow


@given(a_values=half_groups, b_values=half_groups)
@settings(max_examples=200, deadline=None)
def test_m8m4_agrees_with_m8m8_on_widened_operand(a_values, b_values):
    a = convert_group(a_values, CFG)
    b = convert_group(b_values, BfpConfig(32, 4))
    widened = BfpGroup(b.shared_exponent, b.signs, b.magnitudes << 4, 8)
    assert mac_m8m4(a, b) == mac_m8m8(a, widened)


def test_accumulate_examples():
    assert accumulate([PartialSum(0.875), PartialSum(1.5)]).value == np.float32(2.375)
    assert accumulate([]).value == 0.0
    assert accumulate([PartialSum(1.0), PartialSum(65504.0, True)]).overflow


def test_accumulate_matches_fp32_fold(rng):
    values = [float(v) for v in rng.normal(scale=100.0, size=128).astype(np.float16)]
    expected = reduce(lambda acc, v: np.float32(acc + np.float32(v)), values, np.float32(0.0))
    assert accumulate(PartialSum(v) for v in values).value == expected


def test_round_to_half_saturates():
    half, overflow = round_to_half(np.array([1.0, 1e6, -1e6]))
    assert half.tolist() == [1.0, 65504.0, -65504.0]
    assert overflow.tolist() == [False, True, True]


def test_mode_selection():
    assert mode_for(8, 4) is MacMode.M8M4
    assert mode_for(8, 8) is MacMode.M8M8
    assert mode_for(8, 2) is MacMode.M8M4


def test_gemm_identity():
    e1 = np.zeros((1, 32))
    e1[0, 0] = 1.0
    result = gemm(MacMode.M8M8, _operand(e1), _operand(e1))
    assert result.values.tolist() == [[1.0]]
    assert result.modes == [MacMode.M8M8]


def test_gemm_m8w4_against_fp64_reference(rng):
    x = rng.normal(size=(64, 64))
    weights = quantize_weights(rng.normal(size=(64, 64)) / 8.0, group_size=64)
    a = _operand(x)
    result = gemm(MacMode.M8W4, a, weights)
    reference = a.dequantize() @ weights.dequantize()
    assert np.max(np.abs(result.values - reference)) <= 2.0 ** -9 * np.max(np.abs(reference))
    assert result.overflow_count == 0


def test_gemm_m8w4_equals_mac_fold(rng):
    x = rng.normal(size=(1, 64))
    weights = quantize_weights(rng.normal(size=(64, 3)), group_size=32)
    a = group_tensor(x, "token", CFG)
    result = gemm(MacMode.M8W4, a.as_operand(), weights)
    for n in range(3):
        partials = [mac_m8w4(a.group(0, b), weights.group(b, n)) for b in range(2)]
        assert result.values[0, n] == accumulate(partials).value


def test_gemm_m8m8_equals_split_m8m4_passes(rng):
    a = _operand(rng.normal(size=(8, 64)))
    b = _operand(rng.normal(size=(6, 64)))
    fused = scale_and_accumulate(fused_integer_dots(a, b), a, b)
    result = gemm_bfp(a, b)
    assert np.array_equal(result.values, fused.values)
    assert np.array_equal(result.values, scale_and_accumulate(integer_dots(a, b), a, b).values)
    assert result.modes == [MacMode.M8M8, MacMode.M8M8]


def test_gemm_bfp_follows_precision_tags(rng):
    a = _operand(rng.normal(size=(4, 64)))
    b = _operand(rng.normal(size=(5, 64)))
    mixed = GroupedOperand([b.blocks[0], b.blocks[1].truncate(4)])
    assert gemm_bfp(a, mixed).modes == [MacMode.M8M8, MacMode.M8M4]
    with pytest.raises(InvariantViolationError):
        gemm(MacMode.M8M8, a, mixed)


def test_gemm_shape_errors(rng):
    a = _operand(rng.normal(size=(4, 64)))
    with pytest.raises(ShapeError):
        gemm_bfp(a, _operand(rng.normal(size=(4, 32))))
    with pytest.raises(ShapeError):
        gemm(MacMode.M8W4, a, quantize_weights(rng.normal(size=(64, 4)), group_size=16))
    with pytest.raises(ShapeError):
        gemm(MacMode.M8M4, a, quantize_weights(rng.normal(size=(64, 4))))


def test_gemm_flags_saturation():
    a = _operand(np.full((1, 32), 60000.0))
    weights = quantize_weights(np.full((32, 1), 7.0), group_size=32)
    result = gemm(MacMode.M8W4, a, weights)
    assert result.overflow_count == 1
    assert result.values[0, 0] == np.float32(65504.0)
