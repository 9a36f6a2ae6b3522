# routes/simulation_routes.py
# attn-sim / calibrate / storage commands

from dataclasses import replace

import click
from loguru import logger

from controllers.pipeline_controller import ABLATION_TOGGLES, PipelineController, load_model_config
from models.errors import HarmoniaError, InvalidArgumentError, LayoutError
from models.kvcache import KvPolicy
from routes.route_helpers import exit_on_failure, parse_int_list
from views.file_formats import read_tensor
from views.report_views import (
    calibration_sidecar,
    read_scale_sidecar,
    render_storage,
    render_summary,
    write_json,
    write_table,
)


def _load_config(config_path, scale_path=None):
    """Config file plus an optional calibrated scale; errors exit with the error's code."""
    try:
        cfg = load_model_config(config_path)
        if scale_path:
            cfg = replace(cfg, scale=read_scale_sidecar(scale_path))
        return cfg
    except HarmoniaError as e:
        exit_on_failure({"success": False, "error": str(e), "exit_code": e.exit_code})


def _parse_toggles(text: str):
    toggles = [t.strip() for t in text.split(",") if t.strip()]
    unknown = sorted(set(toggles) - set(ABLATION_TOGGLES))
    if unknown:
        raise click.BadParameter(f"unknown toggles {unknown}; choose from {', '.join(ABLATION_TOGGLES)}")
    return toggles


def register_simulation_commands(cli: click.Group, conversion):
    """Register the toy-model commands and the closed-form storage query."""

    @cli.command("attn-sim")
    @click.option("--config", "config_path", help="run configuration JSON")
    @click.option("--report", "report_path", required=True, help="JSON report, or CSV table for sweeps")
    @click.option("--sweep", is_flag=True, help="group size x mantissa width grid")
    @click.option("--kv-sweep", is_flag=True, help="KV mantissa width sweep")
    @click.option("--ablation", "toggles", help=f"comma-separated subset of {','.join(ABLATION_TOGGLES)}")
    @click.option("--seeds", help="comma-separated seeds for --ablation")
    @click.option("--scale", "scale_path", help="calibration sidecar from the calibrate command")
    def attn_sim(config_path, report_path, sweep, kv_sweep, toggles, seeds, scale_path):
        """Toy attention + FFN block through the BFP pipeline, compared with FP64."""
        cfg = _load_config(config_path, scale_path)
        controller = PipelineController(cfg)
        if sweep or kv_sweep or toggles:
            if sweep:
                result = exit_on_failure(controller.sweep())
            elif kv_sweep:
                result = exit_on_failure(controller.kv_sweep())
            else:
                result = exit_on_failure(controller.ablation(_parse_toggles(toggles),
                                                             parse_int_list(seeds) if seeds else None))
            write_table(report_path, result["table"])
            click.echo(result["table"].to_string(index=False))
            return
        result = exit_on_failure(controller.simulate())
        write_json(report_path, result["report"])
        click.echo(render_summary(result["report"]))

    @cli.command("calibrate")
    @click.option("--config", "config_path", help="run configuration JSON")
    @click.option("--samples", "samples_path", help="HRMT tensor of (T, C) or (n, T, C) calibration inputs")
    @click.option("--out", "out_path", required=True, help="sidecar JSON to write")
    def calibrate(config_path, samples_path, out_path):
        """Offline search for the per-channel smoothing scale S."""
        cfg = _load_config(config_path)
        samples = None
        if samples_path:
            try:
                values = read_tensor(samples_path)
                if values.ndim == 2:
                    values = values[None]
                if values.ndim != 3 or values.shape[2] != cfg.hidden:
                    raise LayoutError(f"calibration samples {values.shape} do not end in hidden size {cfg.hidden}")
                samples = list(values)
            except HarmoniaError as e:
                exit_on_failure({"success": False, "error": str(e), "exit_code": e.exit_code})
        result = exit_on_failure(PipelineController(cfg).calibrate(samples))
        calibration = result["calibration"]
        write_json(out_path, calibration_sidecar(calibration, result["offsets"], result["seed"]))
        click.echo(f"objective: {calibration.initial_objective:.6e} -> {calibration.objective:.6e} "
                   f"({calibration.improvement:.1%} better, {calibration.evaluations} evaluations)")

    @cli.command("storage")
    @click.option("--tokens", type=int, required=True)
    @click.option("--channels", type=int, default=None, help="defaults to the configured hidden size")
    @click.option("--config", "config_path", help="run configuration JSON supplying the KV policy")
    @click.option("--initial", type=int, help="initial (sink) tokens kept at m_high")
    @click.option("--local", type=int, help="most recent tokens kept at m_high")
    @click.option("--m-high", type=int)
    @click.option("--m-low", type=int)
    @click.option("--group-size", type=int)
    @click.option("--no-exponent", is_flag=True, help="leave the shared exponent out of the count")
    @click.option("--json", "json_path", help="also write the report as JSON")
    def storage(tokens, channels, config_path, initial, local, m_high, m_low, group_size, no_exponent, json_path):
        """Closed-form KV cache size under the asymmetric policy."""
        cfg = _load_config(config_path)
        overrides = {"initial_tokens": initial, "local_tokens": local, "m_high": m_high,
                     "m_low": m_low, "group_size": group_size}
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if no_exponent:
            overrides["count_shared_exponent"] = False
        try:
            policy = KvPolicy.from_dict({**cfg.kv_policy.to_dict(), **overrides})
            if tokens < 0:
                raise InvalidArgumentError("--tokens must be >= 0")
        except HarmoniaError as e:
            exit_on_failure({"success": False, "error": str(e), "exit_code": e.exit_code})
        logger.debug(f"📊 storage query T={tokens} policy={policy.to_dict()}")
        result = exit_on_failure(conversion.storage(tokens, channels or cfg.hidden, policy))
        click.echo(render_storage(result["report"]))
        if json_path:
            write_json(json_path, result["report"].to_dict())
