# controllers/pipeline_controller.py
# Toy attention + FFN block on the BFP emulation, its FP64 shadow path, sweeps, ablation and calibration

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.special import softmax

from models.dataflow import DataflowPolicy, GemmShape, choose_policy
from models.errors import ConfigError, HarmoniaError, InvariantViolationError, LayoutError
from models.grouping import GroupedOperand, group_tensor
from models.kvcache import KvCacheStore, KvPolicy, storage_bits, storage_bits_closed
from models.numerics import BfpConfig, GroupAxis, bits_per_element, fake_quantize, to_half_array
from models.pe import GemmResult, MacMode, QuantWeights, gemm, gemm_bfp, quantize_weights
from models.smoothing import (
    OFFSET_WINDOW,
    CalibrationResult,
    OffsetVector,
    ScaleVector,
    absorb_scale,
    apply_offsets,
    calibrate_scale,
    compute_online_offsets,
)

DEFAULT_CONFIG_FILE = "harmonia_config.json"
WEIGHT_BITS = 4
ROW_SUM_TOLERANCE = 1e-6
KL_FLOOR = 1e-30
ABLATION_TOGGLES = ("asym_alloc", "offline_smooth", "online_smooth")

PROMPT_STREAM = 0
DECODE_STREAM = 1
CALIBRATION_STREAM = 2


@dataclass
class ModelConfig:
    """Toy model and run configuration; mirrors the keys of harmonia_config.json."""
    hidden: int = 64
    heads: int = 1
    head_dim: int = 64
    ffn_dim: int = 128
    seq_len: int = 64
    decode_steps: int = 8
    group_size: int = 32
    mantissa_bits: int = 8
    weight_group: int = 128
    kv: KvPolicy = field(default_factory=KvPolicy)
    asym_alloc: bool = True
    online_smoothing: bool = True
    top_k: int = 16
    offline_smoothing: bool = False
    calib_iters: int = 100
    calib_max_evaluations: int = 2000
    calib_samples: int = 1
    outlier_channels: List[int] = field(default_factory=lambda: [3])
    outlier_factor: float = 64.0
    outlier_shift: float = 4.0
    input_bias: float = 1.0
    tile: int = 16
    seed: int = 0
    scale: Optional[List[float]] = None
    sweep_group_sizes: List[int] = field(default_factory=lambda: [16, 32, 64])
    sweep_mantissa_bits: List[int] = field(default_factory=lambda: [2, 4, 6, 8])
    kv_sweep_widths: List[int] = field(default_factory=lambda: [8, 7, 6, 5, 4, 3, 2, 1])

    def __post_init__(self):
        if self.hidden != self.heads * self.head_dim:
            raise ConfigError(f"hidden {self.hidden} != heads {self.heads} x head_dim {self.head_dim}")
        g = self.group_size
        for name in ("hidden", "head_dim", "ffn_dim"):
            if getattr(self, name) % g:
                raise ConfigError(f"{name}={getattr(self, name)} is not a multiple of group size {g}")
        if self.weight_group % g:
            raise ConfigError(f"weight group {self.weight_group} is not a multiple of group size {g}")
        if self.kv.group_size != g:
            raise ConfigError(f"KV group size {self.kv.group_size} differs from activation group size {g}")
        if self.seq_len < 1 or self.decode_steps < 0:
            raise ConfigError("seq_len must be >= 1 and decode_steps >= 0")
        if not 0 <= self.top_k <= self.hidden:
            raise ConfigError(f"top_k must lie in [0, {self.hidden}]")
        if any(not 0 <= c < self.hidden for c in self.outlier_channels):
            raise ConfigError(f"outlier channels {self.outlier_channels} outside [0, {self.hidden})")
        if self.scale is not None and len(self.scale) != self.hidden:
            raise ConfigError(f"scale has {len(self.scale)} entries, expected {self.hidden}")
        if self.tile < 1 or self.calib_samples < 1 or self.calib_iters < 0:
            raise ConfigError("tile and calib_samples must be >= 1, calib_iters >= 0")
        BfpConfig(g, self.mantissa_bits)

    @property
    def bfp(self) -> BfpConfig:
        return BfpConfig(self.group_size, self.mantissa_bits)

    @property
    def kv_policy(self) -> KvPolicy:
        """The cache policy in effect; without asymmetric allocation every entry sits at m_low."""
        if self.asym_alloc:
            return self.kv
        return replace(self.kv, initial_tokens=0, local_tokens=0)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.warning(f"⚠️ Ignoring unknown config keys: {unknown}")
        kwargs = {k: v for k, v in data.items() if k in known}
        kwargs["kv"] = KvPolicy.from_dict(data.get("kv", {}))
        return cls(**kwargs)

    def to_dict(self) -> Dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["kv"] = self.kv.to_dict()
        return out


def load_model_config(path: Optional[str] = None) -> ModelConfig:
    """
    Read a JSON run configuration; HARMONIA_SEED overrides the configured seed.
    A missing default file falls back to the built-in defaults.
    """
    path = path or DEFAULT_CONFIG_FILE
    data: Dict = {}
    if os.path.exists(path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}")
        logger.info(f"✅ Loaded run configuration from {path}")
    elif path != DEFAULT_CONFIG_FILE:
        raise ConfigError(f"config file not found: {path}")
    env_seed = os.getenv("HARMONIA_SEED")
    if env_seed:
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"HARMONIA_SEED must be an integer, got {env_seed!r}")
        logger.info(f"📊 Seed overridden by HARMONIA_SEED={env_seed}")
    return ModelConfig.from_dict(data)


@dataclass(eq=False)
class ToyModel:
    """
    raw: float weights (input x output) after outlier injection, before scale absorption
    weights: INT4 weights after absorbing `scale`
    """
    cfg: ModelConfig
    raw: Dict[str, np.ndarray]
    scale: ScaleVector
    weights: Dict[str, QuantWeights]
    input_mean: np.ndarray
    seed: int
    _dense: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def dense(self, name: str) -> np.ndarray:
        """Dequantized INT4 weights; the shadow path runs on these."""
        if name not in self._dense:
            self._dense[name] = self.weights[name].dequantize()
        return self._dense[name]


def _inject_outliers(wk: np.ndarray, cfg: ModelConfig, input_mean: np.ndarray, rng: np.random.Generator):
    """Tilt and scale the outlier columns of Wk in place."""
    columns = cfg.outlier_channels
    norm2 = float(input_mean @ input_mean)
    if cfg.outlier_shift and norm2 > 0.0:
        signs = rng.choice([-1.0, 1.0], len(columns))
        wk[:, columns] += np.outer(input_mean / norm2, signs * cfg.outlier_shift)
    wk[:, columns] *= cfg.outlier_factor


def build_toy_model(cfg: ModelConfig, seed: Optional[int] = None, scale=None) -> ToyModel:
    """
    Gaussian projection and FFN weights, K-projection outlier columns multiplied by
    cfg.outlier_factor, S absorbed into Wq / Wk, then group-wise INT4 quantization.

    Outlier channels are systematic: before scaling, each outlier column is tilted along the
    input mean so the channel sits near ±outlier_shift (in units of its per-token spread)
    and keeps one sign across tokens.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    c, f = cfg.hidden, cfg.ffn_dim
    raw = {
        "wq": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
        "wk": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
        "wv": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
        "wo": rng.normal(0.0, 1.0 / math.sqrt(c), (c, c)),
        "w1": rng.normal(0.0, 1.0 / math.sqrt(c), (c, f)),
        "w2": rng.normal(0.0, 1.0 / math.sqrt(f), (f, c)),
    }
    input_mean = rng.normal(0.0, cfg.input_bias, c)
    if cfg.outlier_channels:
        _inject_outliers(raw["wk"], cfg, input_mean, rng)

    if scale is None:
        scale = cfg.scale if cfg.scale is not None else np.ones(c)
    scale = scale if isinstance(scale, ScaleVector) else ScaleVector(scale)
    wq, wk = absorb_scale(raw["wq"], raw["wk"], scale)
    absorbed = dict(raw, wq=wq, wk=wk)
    weights = {name: quantize_weights(w, cfg.weight_group) for name, w in absorbed.items()}
    logger.debug(f"✅ Toy model built: C={c} heads={cfg.heads} ffn={f} seed={seed}")
    return ToyModel(cfg, raw, scale, weights, input_mean, seed)


def make_inputs(model: ToyModel, tokens: int, stream: int = PROMPT_STREAM) -> np.ndarray:
    """FP16 token activations with the model's per-channel mean; `stream` separates prompt, decode and calibration data."""
    rng = np.random.default_rng([model.seed, stream])
    return to_half_array(rng.normal(size=(tokens, model.cfg.hidden)) + model.input_mean)


def relative_error(approx, reference) -> Dict[str, float]:
    """|approx - reference| / max|reference|, summarised as mean and max."""
    reference = np.asarray(reference, dtype=np.float64)
    err = np.abs(np.asarray(approx, dtype=np.float64) - reference)
    if err.size == 0:
        return {"mean": 0.0, "max": 0.0}
    peak = float(np.max(np.abs(reference))) or 1.0
    return {"mean": float(err.mean() / peak), "max": float(err.max() / peak)}


def row_kl(reference: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """KL(reference || approx) per row."""
    p = np.asarray(reference, dtype=np.float64)
    q = np.maximum(np.asarray(approx, dtype=np.float64), KL_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0).sum(axis=-1)


def causal_mask(positions: np.ndarray, keys: int) -> np.ndarray:
    return np.arange(keys)[None, :] > np.asarray(positions)[:, None]


def reference_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
                        positions: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """FP64 causal multi-head attention. Returns (context, probabilities stacked over heads)."""
    head_dim = q.shape[1] // heads
    if positions is None:
        positions = np.arange(k.shape[0] - q.shape[0], k.shape[0])
    mask = causal_mask(positions, k.shape[0])
    contexts, probs = [], []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[:, cols] @ k[:, cols].T / math.sqrt(head_dim)
        p = softmax(np.where(mask, -np.inf, scores), axis=-1)
        contexts.append(p @ v[:, cols])
        probs.append(p)
    return np.hstack(contexts), np.vstack(probs)


@dataclass
class StepReport:
    stage: str
    tokens: int
    errors: Dict[str, Dict[str, float]]
    attention_kl: List[float]
    kv_storage_bits: int
    ema: Dict
    overflow_count: int
    modes: Dict[str, int]
    max_row_sum_error: float

    def validate(self) -> "StepReport":
        values = [v for layer in self.errors.values() for v in layer.values()]
        values += list(self.attention_kl) + [self.ema["total_bits"], self.ema["energy_pJ"], self.max_row_sum_error]
        if not np.all(np.isfinite(values)):
            raise InvariantViolationError(f"non-finite metric in {self.stage} report")
        return self

    @property
    def mean_kl(self) -> float:
        return float(np.mean(self.attention_kl)) if self.attention_kl else 0.0

    def to_dict(self) -> Dict:
        return {
            "stage": self.stage,
            "tokens": self.tokens,
            "errors": self.errors,
            "attention_kl": list(self.attention_kl),
            "kv_storage_bits": self.kv_storage_bits,
            "ema": self.ema,
            "overflow_count": self.overflow_count,
            "modes": self.modes,
            "max_row_sum_error": self.max_row_sum_error,
        }


class _StepLedger:
    """Collects MAC modes, saturation counts and the EMA cost of every GEMM of one step."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.overflow = 0
        self.modes: Counter = Counter()
        self.reports = []

    def record(self, result: GemmResult, M: int, K: int, N: int, bits_a, bits_b):
        self.overflow += result.overflow_count
        self.modes.update(m.value for m in result.modes)
        tile = self.cfg.tile
        shape = GemmShape(M, K, N, math.gcd(M, tile), math.gcd(N, tile), bits_a, bits_b)
        self.reports.append(choose_policy(shape))

    def ema_summary(self) -> Dict:
        votes = Counter(r.chosen_policy for r in self.reports)
        policy = DataflowPolicy.ROW_FIRST if votes[DataflowPolicy.ROW_FIRST] > votes[DataflowPolicy.COLUMN_FIRST] \
            else DataflowPolicy.COLUMN_FIRST
        return {
            "policy": policy.value,
            "elements_A": sum(r.elements_a for r in self.reports),
            "elements_B": sum(r.elements_b for r in self.reports),
            "total_bits": float(sum(r.total_bits for r in self.reports)),
            "energy_pJ": float(sum(r.energy_pj for r in self.reports)),
            "gemms": len(self.reports),
        }


@dataclass(eq=False)
class InferenceSession:
    model: ToyModel
    cache: KvCacheStore
    offsets: Optional[OffsetVector] = None
    shadow_k: Optional[np.ndarray] = None
    shadow_v: Optional[np.ndarray] = None
    reports: List[StepReport] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return self.cache.token_count


class StepTrace(NamedTuple):
    output: np.ndarray
    reference_output: np.ndarray
    probabilities: np.ndarray
    reference_probabilities: np.ndarray
    report: StepReport


class PrefillResult(NamedTuple):
    outputs: np.ndarray
    cache: KvCacheStore
    report: StepReport
    session: InferenceSession
    trace: StepTrace


class DecodeResult(NamedTuple):
    output: np.ndarray
    cache: KvCacheStore
    report: StepReport
    trace: StepTrace


def _weight_bits(cfg: ModelConfig) -> Fraction:
    return WEIGHT_BITS + Fraction(16, cfg.weight_group)


def _mean_bits(blocks, cfg: ModelConfig) -> Fraction:
    total = sum(Fraction(b.signs.size) * bits_per_element(b.m, cfg.group_size) for b in blocks)
    count = sum(b.signs.size for b in blocks)
    return total / count if count else Fraction(0)


def _check_region_modes(result: GemmResult, widths: Sequence[int]):
    for mode, m in zip(result.modes, widths):
        expected = MacMode.M8M8 if m > 4 else MacMode.M8M4
        if mode is not expected:
            raise InvariantViolationError(f"{m}-bit cache region ran in {mode.value}")


def _project(ledger: _StepLedger, values: np.ndarray, weights: QuantWeights) -> np.ndarray:
    cfg = ledger.cfg
    halves = to_half_array(values)
    operand = group_tensor(halves, GroupAxis.PER_TOKEN, cfg.bfp).as_operand()
    result = gemm(MacMode.M8W4, operand, weights)
    ledger.record(result, halves.shape[0], halves.shape[1], weights.shape[1],
                  bits_per_element(cfg.mantissa_bits, cfg.group_size), _weight_bits(cfg))
    return result.values


def _forward(session: InferenceSession, x: np.ndarray, stage: str) -> StepTrace:
    """
    Run new token rows through the block: project, smooth and cache K/V, attend over the
    whole cache (causal), then output projection and FFN. The FP64 shadow path follows
    the same steps on exact activations with the same quantized weights.
    """
    model = session.model
    cfg = model.cfg
    cache = session.cache
    ledger = _StepLedger(cfg)
    x = to_half_array(x)
    n = x.shape[0]
    start = cache.token_count
    positions = np.arange(start, start + n)

    q = _project(ledger, x, model.weights["wq"])
    k = _project(ledger, x, model.weights["wk"])
    v = _project(ledger, x, model.weights["wv"])

    if session.offsets is None:
        if cfg.online_smoothing:
            session.offsets = compute_online_offsets(k[:OFFSET_WINDOW], cfg.top_k)
        else:
            session.offsets = OffsetVector.zeros(cfg.hidden)
    k_rows = to_half_array(apply_offsets(to_half_array(k), session.offsets))
    v_rows = to_half_array(v)
    for t in range(n):
        cache.append(k_rows[t], v_rows[t])
    total = cache.token_count

    q_operand = group_tensor(to_half_array(q), GroupAxis.PER_TOKEN, cfg.bfp).as_operand()
    blocks_per_head = cfg.head_dim // cfg.group_size
    mask = causal_mask(positions, total)
    act_bits = bits_per_element(cfg.mantissa_bits, cfg.group_size)
    contexts, probabilities = [], []
    for h in range(cfg.heads):
        head_blocks = slice(h * blocks_per_head, (h + 1) * blocks_per_head)
        q_head = GroupedOperand(q_operand.blocks[head_blocks])
        scores = np.empty((n, total), dtype=np.float32)
        for s0, s1, k_operand in cache.key_segments(0, total, head_blocks):
            result = gemm_bfp(q_head, k_operand)
            _check_region_modes(result, k_operand.widths)
            scores[:, s0:s1] = result.values
            ledger.record(result, n, cfg.head_dim, s1 - s0, act_bits, _mean_bits(k_operand.blocks, cfg))
        scores = scores * np.float32(1.0 / math.sqrt(cfg.head_dim))
        p = softmax(np.where(mask, np.float32(-np.inf), scores).astype(np.float32), axis=-1).astype(np.float32)

        p_operand = group_tensor(p.T, GroupAxis.PER_CHANNEL, cfg.bfp).as_operand()
        v_operand = cache.value_operand(slice(h * cfg.head_dim, (h + 1) * cfg.head_dim))
        result = gemm_bfp(p_operand, v_operand)
        _check_region_modes(result, v_operand.widths)
        ledger.record(result, n, total, cfg.head_dim, act_bits, _mean_bits(v_operand.blocks, cfg))
        contexts.append(result.values)
        probabilities.append(p)
    context = np.hstack(contexts)
    probs = np.vstack(probabilities)

    attn = _project(ledger, context, model.weights["wo"])
    hidden = np.maximum(_project(ledger, attn, model.weights["w1"]), 0)
    output = _project(ledger, hidden, model.weights["w2"])

    # FP64 shadow path
    xs = np.asarray(x, dtype=np.float64)
    qs = xs @ model.dense("wq")
    ks = apply_offsets(xs @ model.dense("wk"), session.offsets)
    vs = xs @ model.dense("wv")
    session.shadow_k = ks if session.shadow_k is None else np.vstack([session.shadow_k, ks])
    session.shadow_v = vs if session.shadow_v is None else np.vstack([session.shadow_v, vs])
    context_ref, probs_ref = reference_attention(qs, session.shadow_k, session.shadow_v, cfg.heads, positions)
    attn_ref = context_ref @ model.dense("wo")
    hidden_ref = np.maximum(attn_ref @ model.dense("w1"), 0)
    output_ref = hidden_ref @ model.dense("w2")

    row_sum_error = float(np.max(np.abs(probs.astype(np.float64).sum(axis=-1) - 1.0)))
    if row_sum_error > ROW_SUM_TOLERANCE:
        raise InvariantViolationError(f"attention rows sum to 1 +/- {row_sum_error:.3g}")
    kv_bits = storage_bits(cache)
    if kv_bits != storage_bits_closed(total, cfg.hidden, cache.policy):
        raise InvariantViolationError("cache storage differs from the closed-form count")

    errors = {
        "q": relative_error(q, qs),
        "k_cache": relative_error(cache.dequantized_keys(), session.shadow_k),
        "v_cache": relative_error(cache.dequantized_values(), session.shadow_v),
        "attention": relative_error(context, context_ref),
        "attn_proj": relative_error(attn, attn_ref),
        "ffn_hidden": relative_error(hidden, hidden_ref),
        "output": relative_error(output, output_ref),
    }
    report = StepReport(stage, total, errors, [float(v) for v in row_kl(probs_ref, probs)], kv_bits,
                        ledger.ema_summary(), ledger.overflow, dict(ledger.modes), row_sum_error).validate()
    session.reports.append(report)
    logger.debug(f"📊 {stage} T={total}: attention error {errors['attention']['mean']:.3e}, "
                 f"output error {errors['output']['max']:.3e}")
    return StepTrace(output, output_ref, probs, probs_ref, report)


def new_session(model: ToyModel, verify_demotion: bool = False) -> InferenceSession:
    return InferenceSession(model, KvCacheStore(model.cfg.hidden, model.cfg.kv_policy, verify_demotion))


def prefill(model: ToyModel, X, verify_demotion: bool = False) -> PrefillResult:
    """Process the prompt; online offsets come from its first 32 keys."""
    x = to_half_array(X)
    if x.ndim != 2 or x.shape[1] != model.cfg.hidden:
        raise LayoutError(f"prompt shape {x.shape} does not match hidden size {model.cfg.hidden}")
    session = new_session(model, verify_demotion)
    trace = _forward(session, x, "prefill")
    return PrefillResult(trace.output, session.cache, trace.report, session, trace)


def decode_step(model: ToyModel, session: InferenceSession, x_row) -> DecodeResult:
    if session.offsets is None or session.tokens == 0:
        raise InvariantViolationError("decode_step needs a session initialised by prefill")
    if session.model is not model:
        raise InvariantViolationError("session belongs to a different model")
    x = to_half_array(x_row).reshape(1, -1)
    if x.shape[1] != model.cfg.hidden:
        raise LayoutError(f"token has {x.shape[1]} channels, expected {model.cfg.hidden}")
    trace = _forward(session, x, "decode")
    return DecodeResult(trace.output[0], session.cache, trace.report, trace)


def run_simulation(cfg: ModelConfig, model: Optional[ToyModel] = None) -> InferenceSession:
    """Prefill on the prompt stream, then cfg.decode_steps decode steps."""
    model = model or build_toy_model(cfg)
    logger.info(f"🚀 Simulating T={cfg.seq_len} prompt + {cfg.decode_steps} decode steps (seed {model.seed})")
    result = prefill(model, make_inputs(model, cfg.seq_len, PROMPT_STREAM))
    for row in make_inputs(model, cfg.decode_steps, DECODE_STREAM):
        decode_step(model, result.session, row)
    return result.session


def mean_error(session: InferenceSession, layer: str = "attention") -> float:
    """Token-weighted mean of a layer's mean error over every step of the session."""
    weights, values = [], []
    previous = 0
    for report in session.reports:
        weights.append(report.tokens - previous)
        values.append(report.errors[layer]["mean"])
        previous = report.tokens
    return float(np.average(values, weights=weights))


def _report_row(report: StepReport) -> Dict:
    row = {}
    for layer, metrics in report.errors.items():
        row[f"{layer}_mean"] = metrics["mean"]
        row[f"{layer}_max"] = metrics["max"]
    row.update({
        "kl_mean": report.mean_kl,
        "kv_bits": report.kv_storage_bits,
        "ema_bits": report.ema["total_bits"],
        "energy_pJ": report.ema["energy_pJ"],
        "overflow_count": report.overflow_count,
    })
    return row


def run_sweep(cfg: ModelConfig, group_sizes: Optional[Iterable[int]] = None,
              mantissa_bits: Optional[Iterable[int]] = None) -> pd.DataFrame:
    """
    One prefill per (group size, mantissa width) point with every activation, the KV cache
    included, at that uniform width.
    """
    group_sizes = list(group_sizes or cfg.sweep_group_sizes)
    mantissa_bits = list(mantissa_bits or cfg.sweep_mantissa_bits)
    rows = []
    for g in group_sizes:
        for m in mantissa_bits:
            kv = replace(cfg.kv, group_size=g, m_high=m, m_low=m)
            point = replace(cfg, group_size=g, mantissa_bits=m, kv=kv)
            model = build_toy_model(point)
            report = prefill(model, make_inputs(model, point.seq_len)).report
            rows.append({"group_size": g, "mantissa_bits": m,
                         "bits_per_element": float(bits_per_element(m, g)), **_report_row(report)})
    logger.info(f"📊 Sweep finished: {len(rows)} grid points")
    return pd.DataFrame(rows)


def run_kv_sweep(cfg: ModelConfig, widths: Optional[Iterable[int]] = None) -> pd.DataFrame:
    """Lower the KV mantissa width with every other activation left at cfg.mantissa_bits."""
    rows = []
    for m in list(widths or cfg.kv_sweep_widths):
        point = replace(cfg, kv=replace(cfg.kv, m_high=m, m_low=m))
        model = build_toy_model(point)
        report = prefill(model, make_inputs(model, point.seq_len)).report
        rows.append({"kv_mantissa_bits": m, **_report_row(report)})
    return pd.DataFrame(rows)


def calibration_block(model: ToyModel) -> Callable[[np.ndarray, bool, np.ndarray], np.ndarray]:
    """
    Float attention block used as the calibration objective: Q at the activation width,
    K and V at the cache's low width, scale S applied through weight absorption.
    """
    cfg = model.cfg
    q_cfg = cfg.bfp
    low_cfg = BfpConfig(cfg.group_size, cfg.kv.m_low)
    wv = model.raw["wv"]

    def block(x: np.ndarray, convert: bool, S: np.ndarray) -> np.ndarray:
        wq, wk = absorb_scale(model.raw["wq"], model.raw["wk"], S)
        q, k, v = x @ wq, x @ wk, x @ wv
        if convert:
            q = fake_quantize(q, q_cfg, GroupAxis.PER_TOKEN)
            k = fake_quantize(k, low_cfg, GroupAxis.PER_TOKEN)
            v = fake_quantize(v, low_cfg, GroupAxis.PER_CHANNEL)
        context, _ = reference_attention(q, k, v, cfg.heads)
        return context

    return block


def calibrate_model(cfg: ModelConfig, model: Optional[ToyModel] = None,
                    samples: Optional[Sequence[np.ndarray]] = None) -> CalibrationResult:
    model = model or build_toy_model(cfg, scale=np.ones(cfg.hidden))
    if samples is None:
        samples = [make_inputs(model, cfg.seq_len, CALIBRATION_STREAM + i) for i in range(cfg.calib_samples)]
    return calibrate_scale(calibration_block(model), samples, cfg.hidden, iters=cfg.calib_iters,
                           max_evaluations=cfg.calib_max_evaluations)


def _ablation_arms(toggles: Sequence[str]) -> List[Dict[str, bool]]:
    off = {name: False for name in ABLATION_TOGGLES}
    arms = [dict(off)]
    for name in toggles:
        arms.append(dict(off, **{name: True}))
    if len(toggles) > 1:
        arms.append(dict(off, **{name: True for name in toggles}))
    return arms


def ablation(cfg: ModelConfig, toggles: Sequence[str] = ABLATION_TOGGLES,
             seed: Optional[int] = None) -> pd.DataFrame:
    """
    Paired runs on one seed: every toggle off (the naive configuration), each toggle alone,
    and all requested toggles together. Deltas are against the naive arm.
    """
    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown:
        raise ConfigError(f"unknown ablation toggles: {sorted(unknown)}")
    seed = cfg.seed if seed is None else seed
    base = replace(cfg, seed=seed, scale=None)
    calibration = None
    rows = []
    for arm in _ablation_arms(list(toggles)):
        arm_cfg = replace(base, asym_alloc=arm["asym_alloc"], online_smoothing=arm["online_smooth"],
                          offline_smoothing=arm["offline_smooth"])
        scale = None
        if arm["offline_smooth"]:
            if calibration is None:
                calibration = calibrate_model(arm_cfg)
            scale = calibration.scale
        session = run_simulation(arm_cfg, build_toy_model(arm_cfg, scale=scale))
        name = "+".join(k for k, on in arm.items() if on) or "naive"
        rows.append({"arm": name, "seed": seed, **arm,
                     "attention_error": mean_error(session, "attention"),
                     "output_error": mean_error(session, "output"),
                     "kv_bits": session.reports[-1].kv_storage_bits})
    table = pd.DataFrame(rows)
    table["attention_delta"] = table["attention_error"] - table.loc[0, "attention_error"]
    table["output_delta"] = table["output_error"] - table.loc[0, "output_error"]
    logger.info(f"📊 Ablation seed {seed}: naive {table.loc[0, 'attention_error']:.3e} -> "
                f"best {table['attention_error'].min():.3e}")
    return table


class PipelineController:
    """
    Entry point used by the command line. Methods return result dictionaries with a
    `success` flag; failures carry `error` and the matching `exit_code`.
    """

    def __init__(self, config: ModelConfig):
        self.config = config

    @staticmethod
    def _failure(e: HarmoniaError) -> Dict:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return {"success": False, "error": str(e), "exit_code": e.exit_code}

    def _model(self, scale=None) -> ToyModel:
        cfg = self.config
        if scale is None and cfg.offline_smoothing and cfg.scale is None:
            scale = calibrate_model(cfg).scale
        return build_toy_model(cfg, scale=scale)

    def simulate(self) -> Dict:
        from views.report_views import build_report

        try:
            model = self._model()
            session = run_simulation(self.config, model)
            report = build_report(self.config, session)
            logger.info(f"✅ Simulation finished at T={session.tokens}")
            return {"success": True, "report": report, "session": session}
        except HarmoniaError as e:
            return self._failure(e)

    def sweep(self) -> Dict:
        try:
            return {"success": True, "table": run_sweep(self.config)}
        except HarmoniaError as e:
            return self._failure(e)

    def kv_sweep(self) -> Dict:
        try:
            return {"success": True, "table": run_kv_sweep(self.config)}
        except HarmoniaError as e:
            return self._failure(e)

    def ablation(self, toggles: Sequence[str] = ABLATION_TOGGLES, seeds: Optional[Sequence[int]] = None) -> Dict:
        try:
            seeds = list(seeds) if seeds else [self.config.seed]
            tables = [ablation(self.config, toggles, seed) for seed in seeds]
            return {"success": True, "table": pd.concat(tables, ignore_index=True), "seeds": seeds}
        except HarmoniaError as e:
            return self._failure(e)

    def calibrate(self, samples: Optional[Sequence[np.ndarray]] = None) -> Dict:
        try:
            cfg = self.config
            model = build_toy_model(cfg, scale=np.ones(cfg.hidden))
            result = calibrate_model(cfg, model, samples)
            calibrated = build_toy_model(cfg, scale=result.scale)
            first = to_half_array(samples[0] if samples else make_inputs(calibrated, cfg.seq_len, CALIBRATION_STREAM))
            offsets = OffsetVector.zeros(cfg.hidden)
            if cfg.online_smoothing and first.shape[0] >= OFFSET_WINDOW:
                keys = first[:OFFSET_WINDOW] @ calibrated.dense("wk")
                offsets = compute_online_offsets(keys, cfg.top_k)
            return {"success": True, "calibration": result, "offsets": offsets, "seed": cfg.seed}
        except HarmoniaError as e:
            return self._failure(e)
