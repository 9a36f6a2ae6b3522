# test_pipeline.py
# Toy attention block end to end: fidelity, determinism, storage, sweeps, ablation and calibration

from dataclasses import replace

import numpy as np
import pytest

from controllers.pipeline_controller import (
    ModelConfig,
    PipelineController,
    ablation,
    build_toy_model,
    calibrate_model,
    decode_step,
    load_model_config,
    make_inputs,
    mean_error,
    prefill,
    run_simulation,
    run_sweep,
)
from models.errors import ConfigError, InvariantViolationError
from models.kvcache import KvPolicy, storage_bits_closed
from models.pe import quantize_weights
from models.smoothing import CalibrationResult, ScaleVector, apply_offsets, compute_online_offsets, exponent_spread
from views.report_views import REPORT_SCHEMA, build_report, validate_schema


def test_simulation_is_deterministic(small_config):
    first = run_simulation(small_config)
    second = run_simulation(small_config)
    assert [r.to_dict() for r in first.reports] == [r.to_dict() for r in second.reports]
    assert first.tokens == small_config.seq_len + small_config.decode_steps


def test_unit_scale_leaves_weights_untouched(small_config):
    model = build_toy_model(small_config, scale=np.ones(small_config.hidden))
    expected = quantize_weights(model.raw["wq"], small_config.weight_group)
    assert np.array_equal(model.weights["wq"].q, expected.q)
    assert np.array_equal(model.weights["wq"].scales, expected.scales)


def test_outlier_channel_widens_key_exponents(small_config):
    spiked = build_toy_model(small_config)
    clean = build_toy_model(replace(small_config, outlier_channels=[]))
    x = make_inputs(clean, 32)
    assert exponent_spread(x @ spiked.dense("wk"), 64) >= exponent_spread(x @ clean.dense("wk"), 64) + 2


@pytest.mark.parametrize("seed", range(5))
def test_online_offsets_shrink_toy_key_exponent_spread(seed):
    cfg = ModelConfig(seed=seed)
    model = build_toy_model(cfg)
    keys = make_inputs(model, cfg.seq_len) @ model.dense("wk")
    offsets = compute_online_offsets(keys[:32], cfg.top_k)
    assert cfg.outlier_channels[0] in offsets.active_channels
    assert exponent_spread(apply_offsets(keys, offsets)) < exponent_spread(keys)


@pytest.mark.parametrize("seed", range(10))
def test_clean_model_fidelity(clean_config, seed):
    session = run_simulation(replace(clean_config, seed=seed))
    report = session.reports[0]
    assert report.errors["output"]["mean"] <= 2.0 ** -5
    assert report.errors["output"]["max"] <= 2.0 ** -3
    assert report.max_row_sum_error <= 1e-6
    assert report.overflow_count == 0


def test_offsets_do_not_change_reference_probabilities(clean_config):
    plain = build_toy_model(clean_config)
    smoothed_cfg = replace(clean_config, online_smoothing=True, top_k=4)
    smoothed = build_toy_model(smoothed_cfg)
    x = make_inputs(plain, clean_config.seq_len)
    without = prefill(plain, x).trace.reference_probabilities
    result = prefill(smoothed, x)
    assert result.session.offsets.o.any()
    assert np.allclose(result.trace.reference_probabilities, without, rtol=1e-10, atol=1e-12)


def test_storage_matches_closed_form_every_step(small_config):
    session = run_simulation(replace(small_config, seq_len=100, decode_steps=3))
    for report in session.reports:
        assert report.kv_storage_bits == storage_bits_closed(report.tokens, small_config.hidden,
                                                             small_config.kv_policy)


def test_low_cache_width_costs_accuracy():
    cfg = ModelConfig(seq_len=160, decode_steps=0)
    low = run_simulation(cfg).reports[0].errors
    high = run_simulation(replace(cfg, kv=KvPolicy(m_low=8))).reports[0].errors
    assert low["k_cache"]["mean"] > high["k_cache"]["mean"]
    assert low["v_cache"]["mean"] > high["v_cache"]["mean"]


def test_asymmetric_allocation_inside_windows_is_uniform_high(small_config):
    cfg = replace(small_config, seq_len=64, decode_steps=0)
    asym = run_simulation(cfg).reports[0]
    uniform = run_simulation(replace(cfg, kv=KvPolicy(m_high=8, m_low=8))).reports[0]
    assert asym.errors == uniform.errors
    assert asym.kv_storage_bits == uniform.kv_storage_bits


def test_decode_step_grows_cache(small_config):
    model = build_toy_model(small_config)
    result = prefill(model, make_inputs(model, small_config.seq_len))
    step = decode_step(model, result.session, make_inputs(model, 1, 1)[0])
    assert step.output.shape == (small_config.hidden,)
    assert step.report.tokens == small_config.seq_len + 1
    assert len(result.session.reports) == 2
    other = build_toy_model(small_config)
    with pytest.raises(InvariantViolationError):
        decode_step(other, result.session, make_inputs(model, 1, 1)[0])


def test_sweep_error_falls_with_mantissa_width(small_config):
    table = run_sweep(replace(small_config, decode_steps=0), [32], [2, 4, 8])
    assert table["mantissa_bits"].tolist() == [2, 4, 8]
    assert table["bits_per_element"].tolist() == [3.15625, 5.15625, 9.15625]
    q_errors = table["q_mean"].tolist()
    assert q_errors[0] > q_errors[1] > q_errors[2]


def test_asymmetric_allocation_lowers_attention_error():
    cfg = ModelConfig(seq_len=128, decode_steps=4)
    for seed in range(10):
        table = ablation(cfg, ["asym_alloc"], seed)
        assert table["arm"].tolist() == ["naive", "asym_alloc"]
        assert table.loc[1, "attention_error"] < table.loc[0, "attention_error"]
        assert table.loc[1, "kv_bits"] > table.loc[0, "kv_bits"]


@pytest.mark.parametrize("seed", range(10))
def test_all_toggles_lower_attention_error(seed):
    cfg = ModelConfig(seq_len=128, decode_steps=4, calib_iters=2)
    table = ablation(cfg, ["asym_alloc", "offline_smooth", "online_smooth"], seed)
    combined = table.iloc[-1]
    assert combined["arm"] == "asym_alloc+offline_smooth+online_smooth"
    assert combined["attention_error"] < table.loc[0, "attention_error"]
    assert combined["attention_delta"] < 0.0


def test_ablation_rejects_unknown_toggle(small_config):
    with pytest.raises(ConfigError):
        ablation(small_config, ["quantum_smooth"])


def test_calibration_does_not_worsen_objective(small_config):
    result = calibrate_model(small_config)
    assert result.objective <= result.initial_objective
    assert len(result.scale) == small_config.hidden


def test_report_schema(small_config):
    session = run_simulation(small_config)
    report = build_report(small_config, session)
    validate_schema(report, REPORT_SCHEMA)
    assert report["tokens"] == 42
    assert len(report["steps"]) == 3
    assert report["errors"]["max_relative_error"] == max(r.errors["output"]["max"] for r in session.reports)
    assert mean_error(session, "output") >= 0.0


def test_config_file_and_seed_override(tmp_path, monkeypatch):
    path = tmp_path / "run.json"
    path.write_text('{"seq_len": 48, "kv": {"m_low": 2}, "colour": "blue"}')
    monkeypatch.setenv("HARMONIA_SEED", "7")
    cfg = load_model_config(str(path))
    assert (cfg.seq_len, cfg.kv.m_low, cfg.seed) == (48, 2, 7)
    with pytest.raises(ConfigError):
        load_model_config(str(tmp_path / "missing.json"))
    with pytest.raises(ConfigError):
        ModelConfig(hidden=48, head_dim=48)


def test_controller_reports_failures(small_config, mocker):
    mocker.patch("controllers.pipeline_controller.run_sweep", side_effect=ConfigError("bad grid"))
    result = PipelineController(small_config).sweep()
    assert result == {"success": False, "error": "bad grid", "exit_code": 3}


def test_offline_smoothing_calibrates_once(small_config, mocker):
    fake = CalibrationResult(ScaleVector.ones(small_config.hidden), 0.0, 0.0)
    calibrate = mocker.patch("controllers.pipeline_controller.calibrate_model", return_value=fake)
    result = PipelineController(replace(small_config, decode_steps=0)).ablation(["offline_smooth"], [0, 1])
    assert result["success"]
    assert calibrate.call_count == 2
    assert result["table"]["arm"].tolist() == ["naive", "offline_smooth"] * 2
