# models/smoothing.py
# Offline per-channel scale learning with weight absorption, and online top-k key offsets

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.optimize import minimize

from .errors import (
    CalibrationDivergedError,
    InvalidArgumentError,
    InvalidScaleError,
    InvariantViolationError,
    LayoutError,
    ShapeError,
)
from .numerics import element_exponents

OFFSET_WINDOW = 32
DEFAULT_TOP_K = 16
DEFAULT_CALIB_ITERS = 100
DEFAULT_MAX_EVALUATIONS = 2000
LOG_SCALE_BOUND = float(np.log(256.0))

BlockEval = Callable[[np.ndarray, bool, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ScaleVector:
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s", _validated_scale(self.s))

    @classmethod
    def ones(cls, channels: int) -> "ScaleVector":
        return cls(np.ones(channels))

    def __len__(self) -> int:
        return int(self.s.size)

    def to_list(self) -> List[float]:
        return [float(v) for v in self.s]


@dataclass(frozen=True, eq=False)
class OffsetVector:
    o: np.ndarray
    active_channels: Tuple[int, ...] = ()

    def __post_init__(self):
        o = np.asarray(self.o, dtype=np.float64).ravel()
        object.__setattr__(self, "o", o)
        object.__setattr__(self, "active_channels", tuple(int(c) for c in self.active_channels))
        inactive = np.ones(o.size, dtype=bool)
        inactive[list(self.active_channels)] = False
        if np.any(o[inactive] != 0):
            raise InvariantViolationError("offset set on a channel outside the active set")

    @classmethod
    def zeros(cls, channels: int) -> "OffsetVector":
        return cls(np.zeros(channels))

    def __len__(self) -> int:
        return int(self.o.size)


def _validated_scale(S) -> np.ndarray:
    if isinstance(S, ScaleVector):
        return S.s
    s = np.asarray(S, dtype=np.float64).ravel()
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise InvalidScaleError("scale entries must be finite and positive")
    return s


def _check_columns(name: str, matrix: np.ndarray, channels: int):
    if matrix.ndim != 2 or matrix.shape[1] != channels:
        raise ShapeError(f"{name} has shape {matrix.shape}, expected {channels} columns")


def apply_scale_qk(Q, K, S) -> Tuple[np.ndarray, np.ndarray]:
    """Q / S and K * S column-wise; Q K^T is unchanged in exact arithmetic."""
    s = _validated_scale(S)
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    _check_columns("Q", Q, s.size)
    _check_columns("K", K, s.size)
    return Q / s[None, :], K * s[None, :]


def absorb_scale(Wq, Wk, S) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fold S into the projection weights (input x output layout): output channel c of Wq
    is divided by S_c, of Wk multiplied by S_c.
    """
    s = _validated_scale(S)
    Wq = np.asarray(Wq, dtype=np.float64)
    Wk = np.asarray(Wk, dtype=np.float64)
    _check_columns("Wq", Wq, s.size)
    _check_columns("Wk", Wk, s.size)
    return Wq / s[None, :], Wk * s[None, :]


@dataclass
class CalibrationResult:
    scale: ScaleVector
    objective: float
    initial_objective: float
    history: List[float] = field(default_factory=list)
    evaluations: int = 0

    @property
    def improvement(self) -> float:
        if self.initial_objective == 0:
            return 0.0
        return 1.0 - self.objective / self.initial_objective


def calibration_objective(block_eval: BlockEval, calib_X: Sequence[np.ndarray], S,
                          references: Optional[Sequence[np.ndarray]] = None) -> float:
    """
    Sum over the calibration set of ||F(W, X) - F(W, Convert_BFP(X); S)||^2.
    `references` caches the unconverted outputs.
    """
    s = _validated_scale(S)
    if references is None:
        references = [block_eval(x, False, np.ones_like(s)) for x in calib_X]
    total = 0.0
    for x, ref in zip(calib_X, references):
        diff = np.asarray(block_eval(x, True, s), dtype=np.float64) - ref
        total += float(np.sum(diff * diff))
    return total


class _Diverged(Exception):
    pass


def calibrate_scale(block_eval: BlockEval, calib_X: Sequence[np.ndarray], channels: int,
                    iters: int = DEFAULT_CALIB_ITERS, init=None,
                    max_evaluations: int = DEFAULT_MAX_EVALUATIONS,
                    bound: float = LOG_SCALE_BOUND) -> CalibrationResult:
    """
    Learn S by derivative-free (Powell) descent on log S within [-bound, bound].

    The best iterate seen is what gets returned, so the objective at return never exceeds
    the objective at `init` (ones by default).

    Parameters:
    ----------
    block_eval : callable
        block_eval(X, convert, S) -> block output; `convert` switches BFP conversion on
    calib_X : sequence of arrays
        calibration inputs
    channels : int
        length of S
    iters : int
        optimizer iterations; 0 returns `init` unchanged

    Raises:
    ------
    CalibrationDivergedError
        the objective became non-finite; `.best` holds the best result seen so far
    """
    if iters < 0:
        raise InvalidArgumentError("calibration iterations must be >= 0")
    calib_X = [np.asarray(x, dtype=np.float64) for x in calib_X]
    start = ScaleVector(np.ones(channels) if init is None else init)
    if len(start) != channels:
        raise ShapeError(f"initial scale has {len(start)} entries, expected {channels}")

    references = [np.asarray(block_eval(x, False, np.ones(channels)), dtype=np.float64) for x in calib_X]
    initial = calibration_objective(block_eval, calib_X, start, references)
    if not np.isfinite(initial):
        raise CalibrationDivergedError("objective is non-finite at the initial scale",
                                       best=CalibrationResult(start, initial, initial))

    best = {"x": np.log(start.s), "f": initial}
    history = [initial]
    evaluations = [0]

    def objective(log_s: np.ndarray) -> float:
        evaluations[0] += 1
        value = calibration_objective(block_eval, calib_X, np.exp(log_s), references)
        if not np.isfinite(value):
            raise _Diverged()
        if value < best["f"]:
            best["x"], best["f"] = np.array(log_s, dtype=np.float64), value
        return value

    def on_iteration(_xk):
        history.append(best["f"])

    def result() -> CalibrationResult:
        return CalibrationResult(ScaleVector(np.exp(best["x"])), best["f"], initial, list(history), evaluations[0])

    if iters == 0 or initial == 0.0:
        return result()

    logger.info(f"🚀 Calibrating {channels} channel scales over {len(calib_X)} samples, objective {initial:.6g}")
    try:
        minimize(objective, np.log(start.s), method="Powell",
                 bounds=[(-bound, bound)] * channels, callback=on_iteration,
                 options={"maxiter": iters, "maxfev": max_evaluations, "xtol": 1e-4, "ftol": 1e-8})
    except _Diverged:
        logger.error(f"❌ Calibration diverged after {evaluations[0]} evaluations")
        raise CalibrationDivergedError("objective became non-finite during calibration", best=result())

    calibrated = result()
    logger.info(f"✅ Calibration done: objective {initial:.6g} -> {calibrated.objective:.6g} "
                f"({evaluations[0]} evaluations)")
    return calibrated


def compute_online_offsets(K_window, k: int = DEFAULT_TOP_K, short_prefill: bool = False) -> OffsetVector:
    """
    Offsets from the initial key window: per channel, the signed element of largest
    magnitude (first occurrence); the k channels with the largest such magnitude get half
    of it, ties going to the lower channel index.

    Args:
        K_window: 32 x C keys (fewer rows only with short_prefill)
        k: number of channels to shift

    Returns:
        OffsetVector with active_channels in rank order
    """
    window = np.asarray(K_window, dtype=np.float64)
    if window.ndim != 2:
        raise LayoutError(f"key window must be 2-D, got shape {window.shape}")
    rows, channels = window.shape
    if rows != OFFSET_WINDOW and not (short_prefill and 0 < rows < OFFSET_WINDOW):
        raise LayoutError(f"key window has {rows} rows, expected {OFFSET_WINDOW}")
    if k < 0 or k > channels:
        raise InvalidArgumentError(f"k={k} outside [0, {channels}]")

    magnitudes = np.abs(window)
    peak_rows = np.argmax(magnitudes, axis=0)
    signed_peak = window[peak_rows, np.arange(channels)]
    ranking = np.argsort(-magnitudes.max(axis=0), kind="stable")
    active = tuple(int(c) for c in ranking[:k])

    o = np.zeros(channels)
    o[list(active)] = 0.5 * signed_peak[list(active)]
    logger.debug(f"📊 Online offsets on channels {active}")
    return OffsetVector(o, active)


def apply_offsets(K, o: Union[OffsetVector, np.ndarray]) -> np.ndarray:
    """K - o on every row; row-wise softmax(Q K^T) is unchanged in exact arithmetic."""
    offsets = o.o if isinstance(o, OffsetVector) else np.asarray(o, dtype=np.float64).ravel()
    K = np.asarray(K, dtype=np.float64)
    if K.shape[-1] != offsets.size:
        raise ShapeError(f"keys have {K.shape[-1]} channels, offsets {offsets.size}")
    return K - offsets


def channel_max_magnitudes(K) -> np.ndarray:
    return np.abs(np.asarray(K, dtype=np.float64)).max(axis=0)


def exponent_spread(K, group_size: int = 32) -> float:
    """
    Mean over per-token groups of (shared exponent - smallest nonzero element exponent).
    Groups that are entirely zero are skipped.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] % group_size:
        raise LayoutError(f"cannot group shape {K.shape} per token by {group_size}")
    groups = K.reshape(-1, group_size)
    exps = element_exponents(groups).astype(np.float64)
    nonzero = groups != 0
    has_any = nonzero.any(axis=1)
    if not has_any.any():
        return 0.0
    shared = np.where(nonzero, exps, -np.inf).max(axis=1)
    smallest = np.where(nonzero, exps, np.inf).min(axis=1)
    return float(np.mean((shared - smallest)[has_any]))
