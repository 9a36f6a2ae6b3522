# test_smoothing.py
# Scale absorption, calibration search and online key offsets

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from models.errors import (
    CalibrationDivergedError,
    InvalidArgumentError,
    InvalidScaleError,
    InvariantViolationError,
    LayoutError,
)
from models.numerics import BfpConfig, GroupAxis, fake_quantize
from models.smoothing import (
    OffsetVector,
    ScaleVector,
    absorb_scale,
    apply_offsets,
    apply_scale_qk,
    calibrate_scale,
    calibration_objective,
    channel_max_magnitudes,
    compute_online_offsets,
    exponent_spread,
)


def _relative(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_apply_scale_identity_and_doubling(rng):
    Q, K = rng.normal(size=(6, 8)), rng.normal(size=(5, 8))
    q1, k1 = apply_scale_qk(Q, K, np.ones(8))
    assert np.array_equal(q1, Q) and np.array_equal(k1, K)
    q2, k2 = apply_scale_qk(Q, K, np.full(8, 2.0))
    assert np.array_equal(q2, Q / 2) and np.array_equal(k2, K * 2)


@pytest.mark.parametrize("bad", [[1.0, 0.0], [1.0, -2.0], [1.0, np.inf], [np.nan, 1.0]])
def test_invalid_scale(bad):
    with pytest.raises(InvalidScaleError):
        ScaleVector(bad)
    with pytest.raises(InvalidScaleError):
        apply_scale_qk(np.ones((1, 2)), np.ones((1, 2)), bad)


def test_absorb_identity(rng):
    Wq, Wk = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    aq, ak = absorb_scale(Wq, Wk, ScaleVector.ones(8))
    assert np.array_equal(aq, Wq) and np.array_equal(ak, Wk)


def test_absorb_composes(rng):
    Wq, Wk = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    s1, s2 = rng.uniform(0.25, 4.0, 8), rng.uniform(0.25, 4.0, 8)
    twice = absorb_scale(*absorb_scale(Wq, Wk, s1), s2)
    once = absorb_scale(Wq, Wk, s1 * s2)
    assert np.allclose(twice[0], once[0], rtol=1e-12, atol=0)
    assert np.allclose(twice[1], once[1], rtol=1e-12, atol=0)


def test_scale_and_offsets_preserve_attention(rng):
    for _ in range(100):
        C = 16
        X = rng.normal(size=(12, C))
        Wq, Wk = rng.normal(size=(C, C)), rng.normal(size=(C, C))
        S = np.exp(rng.uniform(-2.0, 2.0, C))
        Q, K = X @ Wq, X @ Wk
        scores = Q @ K.T

        q_s, k_s = apply_scale_qk(Q, K, S)
        assert _relative(q_s @ k_s.T, scores) < 1e-10
        aq, ak = absorb_scale(Wq, Wk, S)
        assert _relative((X @ aq) @ (X @ ak).T, scores) < 1e-10

        o = rng.normal(scale=3.0, size=C)
        shifted = softmax(Q @ apply_offsets(K, o).T, axis=-1)
        plain = softmax(scores, axis=-1)
        assert _relative(shifted, plain) < 1e-10
        assert np.array_equal(shifted.argmax(axis=-1), plain.argmax(axis=-1))


def _outlier_block(rng, channels=32, tokens=32):
    Wq = rng.normal(size=(channels, channels)) / np.sqrt(channels)
    Wk = rng.normal(size=(channels, channels)) / np.sqrt(channels)
    Wk[:, 3] *= 64.0
    cfg = BfpConfig(32, 4)

    def block(x, convert, S):
        q, k = apply_scale_qk(x @ Wq, x @ Wk, S)
        if convert:
            q = fake_quantize(q, cfg, GroupAxis.PER_TOKEN)
            k = fake_quantize(k, cfg, GroupAxis.PER_TOKEN)
        return q @ k.T

    return block, [rng.normal(size=(tokens, channels))]


def test_calibration_reduces_outlier_objective(rng):
    block, samples = _outlier_block(rng)
    result = calibrate_scale(block, samples, 32, iters=20)
    assert result.initial_objective > 0
    assert result.objective <= 0.8 * result.initial_objective
    assert result.improvement >= 0.2
    assert result.objective == pytest.approx(calibration_objective(block, samples, result.scale))
    assert all(a >= b for a, b in zip(result.history, result.history[1:]))


def test_calibration_identity_converter_returns_ones(rng):
    def block(x, convert, S):
        q, k = apply_scale_qk(x, x, S)
        return q @ k.T

    result = calibrate_scale(block, [rng.normal(size=(8, 4))], 4, iters=10)
    assert result.objective == 0.0
    assert result.scale.to_list() == [1.0] * 4


def test_calibration_zero_iterations(rng):
    block, samples = _outlier_block(rng)
    result = calibrate_scale(block, samples, 32, iters=0)
    assert result.scale.to_list() == [1.0] * 32
    assert result.objective == result.initial_objective


def test_calibration_is_deterministic(rng):
    block, samples = _outlier_block(rng)
    first = calibrate_scale(block, samples, 32, iters=2, max_evaluations=300)
    second = calibrate_scale(block, samples, 32, iters=2, max_evaluations=300)
    assert np.array_equal(first.scale.s, second.scale.s)


def test_calibration_divergence_keeps_best(rng):
    def block(x, convert, S):
        if convert and not np.all(S == 1.0):
            return np.full((2, 2), np.nan)
        return np.ones((2, 2)) * (1.5 if convert else 1.0)

    with pytest.raises(CalibrationDivergedError) as info:
        calibrate_scale(block, [np.ones((2, 2))], 2, iters=5)
    assert info.value.best.scale.to_list() == [1.0, 1.0]
    assert info.value.exit_code == 4


def test_online_offsets_example():
    window = [[4.0, 0.1, -6.0, 0.2], [3.0, -0.2, 5.0, 0.1]]
    offsets = compute_online_offsets(window, k=2, short_prefill=True)
    assert channel_max_magnitudes(window).tolist() == [4.0, 0.2, 6.0, 0.2]
    assert offsets.active_channels == (2, 0)
    assert offsets.o.tolist() == [2.0, 0.0, -3.0, 0.0]


def test_online_offsets_zero_window_and_k_zero(rng):
    offsets = compute_online_offsets(np.zeros((32, 8)), k=3)
    assert offsets.active_channels == (0, 1, 2)
    assert not offsets.o.any()
    assert not compute_online_offsets(rng.normal(size=(32, 8)), k=0).o.any()


def test_online_offsets_errors(rng):
    with pytest.raises(InvalidArgumentError):
        compute_online_offsets(rng.normal(size=(32, 4)), k=5)
    with pytest.raises(LayoutError):
        compute_online_offsets(rng.normal(size=(31, 4)), k=2)


@given(seed=st.integers(0, 2 ** 32 - 1), k=st.integers(0, 6))
@settings(max_examples=100, deadline=None)
def test_online_offsets_match_brute_force_scan(seed, k):
    window = np.round(np.random.default_rng(seed).normal(scale=4.0, size=(32, 6)), 1)
    peaks = []
    for c in range(6):
        best = 0.0
        for r in range(32):
            if abs(window[r, c]) > abs(best):
                best = window[r, c]
        peaks.append(best)
    order = sorted(range(6), key=lambda c: (-abs(peaks[c]), c))[:k]
    expected = [0.5 * peaks[c] if c in order else 0.0 for c in range(6)]
    offsets = compute_online_offsets(window, k)
    assert list(offsets.active_channels) == order
    assert offsets.o.tolist() == expected


def test_apply_offsets_examples():
    K = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    assert np.array_equal(apply_offsets(K, OffsetVector.zeros(2)), K)
    shifted = apply_offsets(K, OffsetVector([0.0, 2.5], (1,)))
    assert shifted[:, 1].tolist() == [2.5, 2.5, 2.5]
    assert shifted[:, 0].tolist() == [1.0, 2.0, 3.0]


def test_offset_outside_active_set_rejected():
    with pytest.raises(InvariantViolationError):
        OffsetVector([1.0, 0.5], (0,))


def test_exponent_spread_grows_with_outlier(rng):
    K = rng.normal(size=(32, 64))
    spiked = K.copy()
    spiked[:, 3] *= 64.0
    assert exponent_spread(spiked, 64) >= exponent_spread(K, 64) + 2


def _systematic_outlier_keys(rng, tokens=64, channels=64):
    K = rng.normal(size=(tokens, channels))
    K[:, 3] = 64.0 * (4.0 + rng.normal(size=tokens))
    K[:, 40] = -64.0 * (4.0 + rng.normal(size=tokens))
    return K


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("k", [2, 16])
def test_online_offsets_shrink_exponent_spread(seed, k):
    K = _systematic_outlier_keys(np.random.default_rng(seed))
    offsets = compute_online_offsets(K[:32], k)
    assert {3, 40} <= set(offsets.active_channels)
    assert exponent_spread(apply_offsets(K, offsets)) < exponent_spread(K)


@pytest.mark.parametrize("seed", range(5))
def test_channel_scale_shrinks_exponent_spread(seed):
    K = _systematic_outlier_keys(np.random.default_rng(seed))
    S = np.ones(64)
    S[[3, 40]] = 1.0 / 64.0
    _, smoothed = apply_scale_qk(np.ones((1, 64)), K, S)
    assert exponent_spread(smoothed) < exponent_spread(K)
