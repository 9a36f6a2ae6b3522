# conftest.py
# Shared fixtures and the independent scalar oracles the test modules compare against

import math
import os
import sys
from fractions import Fraction

import numpy as np
import pytest

# make the repository root importable when pytest runs from elsewhere
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from controllers.pipeline_controller import ModelConfig  # noqa: E402
from models.kvcache import KvPolicy  # noqa: E402

ORACLE_MIN_EXPONENT = -14


def oracle_shared_exponent(values):
    """Largest unbiased FP16 exponent over the nonzero elements, -14 for an all-zero group."""
    exponents = [math.frexp(abs(float(v)))[1] - 1 for v in values if float(v) != 0.0]
    return max([ORACLE_MIN_EXPONENT] + [max(e, ORACLE_MIN_EXPONENT) for e in exponents])


def oracle_convert(values, m):
    """Element by element FP64 conversion: (shared exponent, signs, magnitudes)."""
    shared = oracle_shared_exponent(values)
    step = Fraction(2) ** (shared - (m - 1))
    signs, magnitudes = [], []
    for v in values:
        v = float(v)
        signs.append(-1 if v < 0 else 1)
        magnitudes.append(math.floor(Fraction(abs(v)) / step))
    return shared, signs, magnitudes


def oracle_dequantize(shared, signs, magnitudes, m):
    step = Fraction(2) ** (shared - (m - 1))
    return [float(s * q * step) for s, q in zip(signs, magnitudes)]


def oracle_group_dot(a, b):
    """Exact rational dot product of two BFP groups."""
    scale = Fraction(2) ** (a.shared_exponent - (a.m - 1) + b.shared_exponent - (b.m - 1))
    dot = sum(int(x) * int(y) for x, y in zip(a.signed(), b.signed()))
    return dot * scale


def oracle_column_first(M, K, N, tile_n):
    """Count element fetches of a column-first tiled GEMM by walking the loops."""
    fetched = 0
    for _ in range(0, N, tile_n):
        fetched += M * K  # A streams once per column strip
        fetched += K * tile_n  # the strip of B stays resident
    return fetched


def oracle_row_first(M, K, N, tile_m):
    fetched = 0
    for _ in range(0, M, tile_m):
        fetched += tile_m * K
        fetched += K * N
    return fetched


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_config():
    """Fast toy model: 64 channels, one head, short prompt."""
    return ModelConfig(seq_len=40, decode_steps=2, calib_iters=2, calib_max_evaluations=200)


@pytest.fixture
def clean_config():
    """No outliers, m=8 everywhere."""
    return ModelConfig(seq_len=64, decode_steps=0, outlier_channels=[], online_smoothing=False,
                       kv=KvPolicy(m_high=8, m_low=8))
