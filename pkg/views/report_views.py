# views/report_views.py
# Run reports: assembly, schema validation, JSON / CSV emission and console summaries

import json
from typing import Dict, List

import numpy as np
import pandas as pd
from loguru import logger

from models.errors import FormatError, InvariantViolationError
from models.kvcache import FP16_BITS

REPORT_SCHEMA = {
    "config": dict,
    "seed": int,
    "tokens": int,
    "storage_bits": int,
    "compression_ratio": float,
    "ema": {
        "policy": str,
        "elements_A": int,
        "elements_B": int,
        "total_bits": float,
        "energy_pJ": float,
    },
    "errors": {
        "per_layer": dict,
        "decode_per_layer": dict,
        "kl_mean": float,
        "max_relative_error": float,
    },
    "smoothing": {
        "S": list,
        "offsets": list,
        "active_channels": list,
    },
    "flags": {
        "overflow_count": int,
    },
    "steps": list,
}

CALIBRATION_SCHEMA = {
    "scale": list,
    "objective": float,
    "initial_objective": float,
    "history": list,
    "offsets": list,
    "active_channels": list,
    "seed": int,
}


def validate_schema(data: Dict, schema: Dict, path: str = "") -> None:
    """Raise InvariantViolationError on a missing key or a value of the wrong type."""
    for key, expected in schema.items():
        where = f"{path}.{key}" if path else key
        if key not in data:
            raise InvariantViolationError(f"report is missing '{where}'")
        value = data[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise InvariantViolationError(f"'{where}' must be an object")
            validate_schema(value, expected, where)
        elif expected is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
                raise InvariantViolationError(f"'{where}' must be a finite number")
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise InvariantViolationError(f"'{where}' must be an integer")
        elif not isinstance(value, expected):
            raise InvariantViolationError(f"'{where}' must be of type {expected.__name__}")


def report_skeleton(data, schema: Dict = REPORT_SCHEMA) -> Dict:
    """Key structure of a report as far as the schema reaches, leaves replaced by type names."""
    out = {}
    for key, expected in schema.items():
        if isinstance(expected, dict):
            out[key] = report_skeleton(data[key], expected)
        else:
            out[key] = expected.__name__
    return out


def _average_errors(steps: List) -> Dict[str, Dict[str, float]]:
    if not steps:
        return {}
    layers = steps[0].errors.keys()
    return {layer: {"mean": float(np.mean([s.errors[layer]["mean"] for s in steps])),
                    "max": float(np.max([s.errors[layer]["max"] for s in steps]))}
            for layer in layers}


def build_report(cfg, session) -> Dict:
    """
    Assemble the run report from a finished inference session.

    Args:
        cfg: ModelConfig of the run
        session: InferenceSession after prefill and decode

    Returns:
        dict: schema-validated report
    """
    prefill_report = session.reports[0]
    decode_reports = session.reports[1:]
    total_bits = session.reports[-1].kv_storage_bits
    fp16_bits = FP16_BITS * 2 * session.tokens * cfg.hidden
    kl = [v for r in session.reports for v in r.attention_kl]
    report = {
        "config": cfg.to_dict(),
        "seed": int(session.model.seed),
        "tokens": int(session.tokens),
        "storage_bits": int(total_bits),
        "compression_ratio": float(fp16_bits / total_bits) if total_bits else 0.0,
        "ema": {
            "policy": prefill_report.ema["policy"],
            "elements_A": int(sum(r.ema["elements_A"] for r in session.reports)),
            "elements_B": int(sum(r.ema["elements_B"] for r in session.reports)),
            "total_bits": float(sum(r.ema["total_bits"] for r in session.reports)),
            "energy_pJ": float(sum(r.ema["energy_pJ"] for r in session.reports)),
        },
        "errors": {
            "per_layer": prefill_report.errors,
            "decode_per_layer": _average_errors(decode_reports),
            "kl_mean": float(np.mean(kl)) if kl else 0.0,
            "max_relative_error": float(max(r.errors["output"]["max"] for r in session.reports)),
        },
        "smoothing": {
            "S": session.model.scale.to_list(),
            "offsets": [float(v) for v in session.offsets.o],
            "active_channels": list(session.offsets.active_channels),
        },
        "flags": {
            "overflow_count": int(sum(r.overflow_count for r in session.reports)),
        },
        "steps": [r.to_dict() for r in session.reports],
    }
    validate_schema(report, REPORT_SCHEMA)
    return report


def calibration_sidecar(result, offsets, seed: int) -> Dict:
    sidecar = {
        "scale": result.scale.to_list(),
        "objective": float(result.objective),
        "initial_objective": float(result.initial_objective),
        "history": [float(v) for v in result.history],
        "evaluations": int(result.evaluations),
        "offsets": [float(v) for v in offsets.o],
        "active_channels": list(offsets.active_channels),
        "seed": int(seed),
    }
    validate_schema(sidecar, CALIBRATION_SCHEMA)
    return sidecar


def read_scale_sidecar(path: str) -> List[float]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read scale file {path}: {e}")
    if not isinstance(data.get("scale"), list):
        raise FormatError(f"{path} has no 'scale' list")
    return [float(v) for v in data["scale"]]


def write_json(path: str, data: Dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    logger.info(f"✅ Wrote {path}")


def write_table(path: str, table: pd.DataFrame) -> None:
    table.to_csv(path, index=False)
    logger.info(f"✅ Wrote {len(table)} rows to {path}")


def render_summary(report: Dict) -> str:
    errors = report["errors"]["per_layer"]
    lines = [
        f"tokens:            {report['tokens']}",
        f"kv storage bits:   {report['storage_bits']}  ({report['compression_ratio']:.3f}x vs FP16)",
        f"ema:               {report['ema']['policy']}  {report['ema']['total_bits']:.0f} bits  "
        f"{report['ema']['energy_pJ']:.1f} pJ",
        f"overflow count:    {report['flags']['overflow_count']}",
        f"max output error:  {report['errors']['max_relative_error']:.3e}",
    ]
    for layer, metrics in errors.items():
        lines.append(f"  {layer:<12} mean {metrics['mean']:.3e}  max {metrics['max']:.3e}")
    return "\n".join(lines)


def render_ema(report) -> str:
    shape = report.shape
    return "\n".join([
        f"shape:          M={shape.M} K={shape.K} N={shape.N} tiles {shape.tile_m}x{shape.tile_n}",
        f"column_first:   {report.column_first} elements",
        f"row_first:      {report.row_first} elements",
        f"policy:         {report.chosen_policy.value}",
        f"total_bits:     {float(report.total_bits):.0f}",
        f"energy_pJ:      {report.energy_pj:.1f}",
    ])


def render_storage(report) -> str:
    return "\n".join([
        f"tokens x channels:   {report.tokens} x {report.channels}",
        f"K bits / V bits:     {report.k_bits} / {report.v_bits}",
        f"bits per element:    {float(report.bits_per_element):.4f}  ({report.bits_per_element})",
        f"size vs FP16:        {float(report.size_fraction):.4%}",
        f"reduction:           {float(report.reduction):.4%}",
        f"compression ratio:   {float(report.compression_ratio):.4f}x",
        f"high precision K/V:  {float(report.high_share.k_fraction):.4%} / {float(report.high_share.v_fraction):.4%}",
    ])
