# test_dataflow.py
# Column-first / row-first EMA closed forms, the tile-loop trace and policy selection

from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from conftest import oracle_column_first, oracle_row_first
from models.dataflow import (
    DataflowPolicy,
    GemmShape,
    choose_policy,
    ema_column_first,
    ema_row_first,
    ema_sweep,
    energy_estimate,
    simulate_trace,
)
from models.errors import ConfigError, InvalidArgumentError, TilingError


def test_column_first_examples():
    assert ema_column_first(GemmShape(64, 32, 48, 16, 16)) == 7680
    assert ema_column_first(GemmShape(64, 32, 48, 16, 48)) == 64 * 32 + 32 * 48


def test_doubling_tile_n_halves_a_refetch():
    narrow = GemmShape(64, 32, 64, 16, 16)
    wide = GemmShape(64, 32, 64, 16, 32)
    kn = 32 * 64
    assert ema_column_first(narrow) - kn == 2 * (ema_column_first(wide) - kn)


def test_row_first_examples():
    assert ema_row_first(GemmShape(64, 32, 48, 16, 16)) == 8192
    assert ema_row_first(GemmShape(16, 32, 48, 16, 16)) == 32 * 48 + 16 * 32
    assert ema_row_first(GemmShape(16, 32, 128, 16, 16)) == 4608


def test_choose_policy_examples():
    report = choose_policy(GemmShape(64, 32, 48, 16, 16))
    assert report.chosen_policy is DataflowPolicy.COLUMN_FIRST
    assert (report.column_first, report.row_first) == (7680, 8192)

    report = choose_policy(GemmShape(16, 32, 128, 16, 16))
    assert report.chosen_policy is DataflowPolicy.ROW_FIRST
    assert (report.column_first, report.row_first) == (8192, 4608)


def test_tie_goes_to_column_first():
    shape = GemmShape(32, 8, 32, 16, 16)
    assert ema_column_first(shape) == ema_row_first(shape)
    assert choose_policy(shape).chosen_policy is DataflowPolicy.COLUMN_FIRST


def test_forced_policy_and_output_traffic():
    shape = GemmShape(64, 32, 48, 16, 16)
    report = choose_policy(shape, "row", include_output=True)
    assert report.chosen_policy is DataflowPolicy.ROW_FIRST
    assert report.elements_a + report.elements_b == 8192
    assert report.output_elements == 64 * 48
    assert report.total_elements == 8192 + 64 * 48
    with pytest.raises(ConfigError):
        choose_policy(shape, "diagonal")


def test_unit_tiles_column_first():
    shape = GemmShape(4, 3, 5, 1, 1)
    assert ema_column_first(shape) == 5 * 4 * 3 + 3 * 5
    assert simulate_trace(shape, "col") == ema_column_first(shape)


@given(
    row_tiles=st.integers(1, 8), tile_m=st.integers(1, 16),
    column_tiles=st.integers(1, 8), tile_n=st.integers(1, 16), K=st.integers(1, 64),
)
@settings(max_examples=1000, deadline=None)
def test_trace_equals_closed_forms(row_tiles, tile_m, column_tiles, tile_n, K):
    shape = GemmShape(row_tiles * tile_m, K, column_tiles * tile_n, tile_m, tile_n)
    column_first = simulate_trace(shape, DataflowPolicy.COLUMN_FIRST)
    row_first = simulate_trace(shape, DataflowPolicy.ROW_FIRST)
    assert column_first == ema_column_first(shape) == oracle_column_first(shape.M, K, shape.N, tile_n)
    assert row_first == ema_row_first(shape) == oracle_row_first(shape.M, K, shape.N, tile_m)
    report = choose_policy(shape)
    assert report.elements_a + report.elements_b == min(column_first, row_first)


def test_energy_examples():
    assert energy_estimate(0) == 0.0
    report = choose_policy(GemmShape(64, 32, 48, 16, 16))
    assert report.total_bits == 122880
    assert report.energy_pj == pytest.approx(479232.0)
    with pytest.raises(InvalidArgumentError):
        energy_estimate(-1)


def test_bfp_operand_energy_is_proportional():
    bits = Fraction(5) + Fraction(5, 32)
    fp16 = choose_policy(GemmShape(64, 32, 48, 16, 16))
    bfp = choose_policy(GemmShape(64, 32, 48, 16, 16, bits, bits))
    assert bfp.total_bits == fp16.total_bits * bits / 16
    assert bfp.energy_pj == pytest.approx(fp16.energy_pj * float(bits) / 16)


@pytest.mark.parametrize("shape, error", [
    ((64, 32, 48, 10, 16), TilingError),
    ((64, 32, 48, 16, 20), TilingError),
    ((0, 32, 48, 16, 16), InvalidArgumentError),
    ((64, -1, 48, 16, 16), InvalidArgumentError),
])
def test_shape_validation(shape, error):
    with pytest.raises(error):
        GemmShape(*shape)


def test_ema_sweep_decode_prefers_row_first():
    table = ema_sweep(4096, 4096, 16, 16, [1, 16, 4096])
    assert table["M"].tolist() == [1, 16, 4096]
    assert table.loc[0, "policy"] == "row_first"
    assert table.loc[2, "policy"] == "column_first"
    assert (table["total_elements"] == table[["column_first", "row_first"]].min(axis=1)).all()


def test_ema_sweep_accepts_token_counts_off_the_tile_grid():
    table = ema_sweep(64, 64, 32, 16, [1, 48, 100])
    assert table["M"].tolist() == [1, 48, 100]
    # 48 rows with a 32-row tile fall back to 16-row tiles
    assert table.loc[1, "column_first"] == ema_column_first(GemmShape(48, 64, 64, 16, 16))
    assert table.loc[1, "row_first"] == ema_row_first(GemmShape(48, 64, 64, 16, 16))
    assert table.loc[2, "row_first"] == ema_row_first(GemmShape(100, 64, 64, 4, 16))
