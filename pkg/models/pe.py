# models/pe.py
# Reconfigurable PE emulation: M8W4 / M8M4 / M8M8 MACs, FP16 partials and FP32 accumulation

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import InvalidArgumentError, InvalidValueError, InvariantViolationError, ShapeError
from .grouping import GroupedOperand
from .numerics import FP16_MAX, NIBBLE, BfpBlock, BfpGroup, split_magnitudes

INT4_MIN = -8
INT4_MAX = 7
DEFAULT_WEIGHT_GROUP = 128
FP16_TINY = 2.0 ** -24


class MacMode(str, Enum):
    M8W4 = "M8W4"
    M8M4 = "M8M4"
    M8M8 = "M8M8"


def mode_for(m_a: int, m_b: int) -> MacMode:
    """Tag -> mode rule for BFP x BFP products: 4-bit B runs M8M4, wider B runs the nibble-split M8M8."""
    return MacMode.M8M4 if m_b <= 4 else MacMode.M8M8


@dataclass(frozen=True, eq=False)
class WeightGroup:
    q: np.ndarray
    scale: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.int64)
        object.__setattr__(self, "q", q)
        if q.size and (q.min() < INT4_MIN or q.max() > INT4_MAX):
            raise InvalidArgumentError("INT4 weights must lie in [-8, 7]")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InvalidArgumentError(f"weight scale must be finite and positive, got {self.scale}")

    def __len__(self) -> int:
        return int(self.q.size)

    def __getitem__(self, index) -> "WeightGroup":
        return WeightGroup(self.q[index], self.scale)


@dataclass(eq=False)
class QuantWeights:
    """
    K x N INT4 weights, grouped along K (the reduction dimension) with one FP16 scale per
    group and output column. The last group is shorter when K % group_size != 0.
    """
    q: np.ndarray
    scales: np.ndarray
    group_size: int

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.q.shape)

    def group(self, k_block: int, column: int) -> WeightGroup:
        start = k_block * self.group_size
        return WeightGroup(self.q[start:start + self.group_size, column], float(self.scales[k_block, column]))

    def groups(self) -> List[WeightGroup]:
        return [self.group(b, n) for n in range(self.q.shape[1]) for b in range(self.scales.shape[0])]

    def dequantize(self) -> np.ndarray:
        per_row = np.repeat(self.scales, self.group_size, axis=0)[:self.q.shape[0]]
        return self.q.astype(np.float64) * per_row


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_weights(w, group_size: int = DEFAULT_WEIGHT_GROUP) -> QuantWeights:
    """
    Symmetric absmax INT4 quantization: scale = max|w| / 7 (1.0 for an all-zero group),
    stored as FP16, q = round-half-away-from-zero(w / scale) clamped to [-8, 7].

    Args:
        w: 1-D vector (one column) or K x N matrix grouped along K
        group_size: weights per scale

    Returns:
        QuantWeights
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.ndim != 2:
        raise ShapeError(f"weights must be 1-D or 2-D, got shape {w.shape}")
    if group_size < 1:
        raise InvalidArgumentError("weight group size must be >= 1")
    if not np.all(np.isfinite(w)):
        raise InvalidValueError("non-finite weight")

    k, n = w.shape
    n_groups = max(1, -(-k // group_size))
    padded = np.pad(w, ((0, n_groups * group_size - k), (0, 0))).reshape(n_groups, group_size, n)
    absmax = np.abs(padded).max(axis=1)
    with np.errstate(over="ignore"):
        scales = np.where(absmax > 0, absmax / INT4_MAX, 1.0).astype(np.float16).astype(np.float64)
    if not np.all(np.isfinite(scales)):
        raise InvalidValueError("weight scale overflows FP16")
    scales = np.maximum(scales, FP16_TINY)
    q = np.clip(_round_half_away(padded / scales[:, None, :]), INT4_MIN, INT4_MAX)
    q = q.reshape(n_groups * group_size, n)[:k].astype(np.int8)
    return QuantWeights(q, scales, group_size)


@dataclass(frozen=True)
class PartialSum:
    value: float
    overflow: bool = False


class AccumulatedSum(NamedTuple):
    value: np.float32
    overflow: bool


def round_to_half(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single RNE rounding onto FP16; magnitudes beyond the finite range saturate to
    +/-65504 and are flagged.
    """
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        half = x.astype(np.float16)
    overflow = np.isinf(half)
    half = np.where(overflow, np.copysign(FP16_MAX, x), half).astype(np.float16)
    return half, overflow


def _partial(dot: int, shift: int, scale: float = 1.0) -> PartialSum:
    half, overflow = round_to_half(np.ldexp(float(dot), shift) * scale)
    return PartialSum(float(half), bool(overflow))


def _check_lengths(a: BfpGroup, length: int):
    if len(a) != length:
        raise ShapeError(f"operand lengths differ: {len(a)} vs {length}")


def mac_m8w4(a: BfpGroup, w: WeightGroup) -> PartialSum:
    """BFP activation group x INT4 weight slice, scaled by the group-wise weight factor."""
    _check_lengths(a, len(w))
    dot = int(np.dot(a.signed(), w.q))
    return _partial(dot, int(a.shared_exponent) - (a.m - 1), w.scale)


def mac_m8m4(a: BfpGroup, b: BfpGroup) -> PartialSum:
    _check_lengths(a, len(b))
    if b.m > 4:
        raise InvalidArgumentError(f"M8M4 expects a 4-bit B operand, got {b.m} bits")
    dot = int(np.dot(a.signed(), b.signed()))
    return _partial(dot, int(a.shared_exponent) - (a.m - 1) + int(b.shared_exponent) - (b.m - 1))


def mac_m8m8(a: BfpGroup, b: BfpGroup) -> PartialSum:
    """
    Two M8M4 passes over the high and low nibbles of B, fused as 16 * D_hi + D_lo.
    """
    _check_lengths(a, len(b))
    hi, lo = split_magnitudes(b.magnitudes)
    signs = b.signs.astype(np.int64)
    d_hi = int(np.dot(a.signed(), signs * hi))
    d_lo = int(np.dot(a.signed(), signs * lo))
    dot = NIBBLE * d_hi + d_lo
    return _partial(dot, int(a.shared_exponent) - (a.m - 1) + int(b.shared_exponent) - (b.m - 1))


def accumulate(partials: Iterable[PartialSum]) -> AccumulatedSum:
    """Left-to-right FP32 fold of the FP16 partials; any saturated partial flags the result."""
    acc = np.float32(0.0)
    overflow = False
    for p in partials:
        acc = np.float32(acc + np.float32(p.value))
        overflow = overflow or p.overflow
    return AccumulatedSum(acc, overflow)


@dataclass(eq=False)
class GemmResult:
    values: np.ndarray
    overflow: np.ndarray
    modes: List[MacMode] = field(default_factory=list)

    @property
    def overflow_count(self) -> int:
        return int(np.count_nonzero(self.overflow))


def split_operand(b: GroupedOperand) -> Tuple[GroupedOperand, GroupedOperand]:
    """High / low nibble views of B; exponents are kept, the scaling still uses B's width."""
    hi_blocks, lo_blocks = [], []
    for block in b.blocks:
        hi, lo = split_magnitudes(block.magnitudes)
        hi_blocks.append(BfpBlock(block.exponents, block.signs, hi, block.m))
        lo_blocks.append(BfpBlock(block.exponents, block.signs, lo, block.m))
    return GroupedOperand(hi_blocks), GroupedOperand(lo_blocks)


def _check_spans(a: GroupedOperand, b: GroupedOperand):
    if a.spans != b.spans:
        raise ShapeError(f"inner group spans differ: {a.spans} vs {b.spans}")


def integer_dots(a: GroupedOperand, b: GroupedOperand) -> List[np.ndarray]:
    """Exact signed integer dot of every (row of A, row of B) pair, one M x N matrix per inner block."""
    _check_spans(a, b)
    return [a_blk.signed() @ b_blk.signed().T for a_blk, b_blk in zip(a.blocks, b.blocks)]


def fused_integer_dots(a: GroupedOperand, b: GroupedOperand) -> List[np.ndarray]:
    hi, lo = split_operand(b)
    return [NIBBLE * d_hi + d_lo for d_hi, d_lo in zip(integer_dots(a, hi), integer_dots(a, lo))]


def scale_and_accumulate(dots: Sequence[np.ndarray], a: GroupedOperand, b: GroupedOperand) -> GemmResult:
    """Per block: scale the integer dots by both exponents, round once to FP16, fold in FP32."""
    acc = np.zeros((a.rows, b.rows), dtype=np.float32)
    overflow = np.zeros((a.rows, b.rows), dtype=bool)
    for dot, a_blk, b_blk in zip(dots, a.blocks, b.blocks):
        shift = ((a_blk.exponents - (a_blk.m - 1))[:, None] + (b_blk.exponents - (b_blk.m - 1))[None, :])
        half, flags = round_to_half(np.ldexp(dot.astype(np.float64), shift.astype(np.int32)))
        acc = acc + half.astype(np.float32)
        overflow |= flags
    return GemmResult(acc, overflow)


def gemm_bfp(a: GroupedOperand, b: GroupedOperand, mode: Optional[MacMode] = None) -> GemmResult:
    """
    BFP x BFP GEMM, C = A . B^T over the shared inner dimension (output-stationary,
    ascending inner block order). Each block's mode follows B's precision tag; when `mode`
    is given every block must agree with it.
    """
    _check_spans(a, b)
    modes = [mode_for(a_blk.m, b_blk.m) for a_blk, b_blk in zip(a.blocks, b.blocks)]
    if mode is not None and any(m != mode for m in modes):
        raise InvariantViolationError(f"requested {mode.value} but precision tags select {sorted({m.value for m in modes})}")

    hi, lo = split_operand(b)
    dots = []
    for j, block_mode in enumerate(modes):
        single_a = a.select_blocks(j, j + 1)
        if block_mode is MacMode.M8M8:
            d_hi = integer_dots(single_a, hi.select_blocks(j, j + 1))[0]
            d_lo = integer_dots(single_a, lo.select_blocks(j, j + 1))[0]
            dots.append(NIBBLE * d_hi + d_lo)
        else:
            dots.append(integer_dots(single_a, b.select_blocks(j, j + 1))[0])
    result = scale_and_accumulate(dots, a, b)
    result.modes = modes
    return result


def gemm_m8w4(a: GroupedOperand, w: QuantWeights) -> GemmResult:
    """BFP activations (rows x K) times INT4 weights (K x N); every activation group must sit inside one weight group."""
    k, n = w.shape
    if a.inner != k:
        raise ShapeError(f"inner dimensions differ: {a.inner} vs {k}")
    acc = np.zeros((a.rows, n), dtype=np.float32)
    overflow = np.zeros((a.rows, n), dtype=bool)
    offset = 0
    for blk in a.blocks:
        w_block = offset // w.group_size
        if (offset + blk.length - 1) // w.group_size != w_block:
            raise ShapeError(f"activation group at {offset} straddles weight groups of {w.group_size}")
        dot = blk.signed() @ w.q[offset:offset + blk.length].astype(np.int64)
        shift = (blk.exponents - (blk.m - 1)).astype(np.int32)[:, None]
        half, flags = round_to_half(np.ldexp(dot.astype(np.float64), shift) * w.scales[w_block][None, :])
        acc = acc + half.astype(np.float32)
        overflow |= flags
        offset += blk.length
    return GemmResult(acc, overflow, [MacMode.M8W4] * len(a.blocks))


def gemm(mode: Union[MacMode, str], a: GroupedOperand, b: Union[GroupedOperand, QuantWeights]) -> GemmResult:
    mode = MacMode(mode)
    if mode is MacMode.M8W4:
        if not isinstance(b, QuantWeights):
            raise ShapeError("M8W4 needs quantized weights as the B operand")
        result = gemm_m8w4(a, b)
    else:
        if not isinstance(b, GroupedOperand):
            raise ShapeError(f"{mode.value} needs a BFP B operand")
        result = gemm_bfp(a, b, mode)
    if result.overflow_count:
        logger.warning(f"⚠️ {mode.value} GEMM saturated {result.overflow_count} partial sums")
    return result
