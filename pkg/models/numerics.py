# models/numerics.py
# FP16 handling and the FP16 -> BFP group conversion primitives

from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import (
    ConfigError,
    EmptyInputError,
    InvalidArgumentError,
    InvalidValueError,
    LayoutError,
)

EXPONENT_BITS = 5
FP16_BIAS = 15
MIN_EXPONENT = -14
MAX_EXPONENT = 15
FP16_MAX = 65504.0
MAX_MANTISSA_BITS = 10
NIBBLE = 16


@dataclass(frozen=True)
class HalfValue:
    """
    Raw FP16 bit pattern (1 sign, 5 exponent, 10 fraction bits).
    """
    bits: int

    def __post_init__(self):
        if not 0 <= int(self.bits) <= 0xFFFF:
            raise InvalidArgumentError(f"not a 16-bit pattern: {self.bits}")

    @classmethod
    def from_float(cls, value: float) -> "HalfValue":
        """Round a real value to FP16 (round-to-nearest-even)."""
        with np.errstate(over="ignore", invalid="ignore"):
            half = np.array(value, dtype=np.float16)
        return cls(int(half.view(np.uint16)))

    def to_float(self) -> float:
        return float(np.array(self.bits, dtype=np.uint16).view(np.float16))

    @property
    def sign(self) -> int:
        return -1 if self.bits & 0x8000 else 1

    @property
    def exponent_field(self) -> int:
        return (self.bits >> 10) & 0x1F

    @property
    def fraction(self) -> int:
        return self.bits & 0x03FF

    def is_finite(self) -> bool:
        return self.exponent_field != 0x1F

    def is_nan(self) -> bool:
        return self.exponent_field == 0x1F and self.fraction != 0

    def is_inf(self) -> bool:
        return self.exponent_field == 0x1F and self.fraction == 0

    def unbiased_exponent(self) -> int:
        # zero and subnormals share the minimum normal exponent
        if self.exponent_field == 0:
            return MIN_EXPONENT
        return self.exponent_field - FP16_BIAS


def encode_half(value: float) -> HalfValue:
    return HalfValue.from_float(value)


def decode_half(half: HalfValue) -> float:
    return half.to_float()


def to_half_array(values) -> np.ndarray:
    """
    Validate and round values onto the FP16 grid.

    Args:
        values: sequence of HalfValue, or anything numpy can turn into a real array

    Returns:
        np.ndarray: float64 array holding FP16-representable values, -0 normalised to +0

    Raises:
        InvalidValueError: NaN, Inf, or a value outside the finite FP16 range
    """
    if isinstance(values, HalfValue):
        values = [values]
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], HalfValue):
        halves = np.array([v.bits for v in values], dtype=np.uint16).view(np.float16)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            halves = np.asarray(values, dtype=np.float64).astype(np.float16)
    if not np.all(np.isfinite(halves)):
        raise InvalidValueError("NaN/Inf (or value beyond the FP16 range) in conversion input")
    out = halves.astype(np.float64)
    out[out == 0] = 0.0
    return out


class GroupAxis(str, Enum):
    PER_TOKEN = "per_token"
    PER_CHANNEL = "per_channel"

    @classmethod
    def parse(cls, text: Union[str, "GroupAxis"]) -> "GroupAxis":
        if isinstance(text, GroupAxis):
            return text
        aliases = {"token": cls.PER_TOKEN, "per_token": cls.PER_TOKEN,
                   "channel": cls.PER_CHANNEL, "per_channel": cls.PER_CHANNEL}
        try:
            return aliases[str(text).lower()]
        except KeyError:
            raise ConfigError(f"unknown grouping axis: {text}")


@dataclass(frozen=True)
class BfpConfig:
    group_size: int = 32
    mantissa_bits: int = 8
    exponent_bits: int = EXPONENT_BITS

    def __post_init__(self):
        if int(self.group_size) < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 1 <= int(self.mantissa_bits) <= MAX_MANTISSA_BITS:
            raise ConfigError(f"mantissa_bits must be in 1..{MAX_MANTISSA_BITS}, got {self.mantissa_bits}")
        if self.exponent_bits != EXPONENT_BITS:
            raise ConfigError("shared exponent width is fixed at 5 bits")

    @property
    def m(self) -> int:
        return self.mantissa_bits

    def with_mantissa(self, m: int) -> "BfpConfig":
        return replace(self, mantissa_bits=m)


@dataclass(frozen=True, eq=False)
class BfpGroup:
    """
    One shared-exponent group. Element i reconstructs to
    signs[i] * magnitudes[i] * 2**(shared_exponent - (m - 1)).
    """
    shared_exponent: int
    signs: np.ndarray
    magnitudes: np.ndarray
    m: int

    def __post_init__(self):
        signs = np.asarray(self.signs, dtype=np.int8)
        magnitudes = np.asarray(self.magnitudes, dtype=np.int64)
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "magnitudes", magnitudes)
        if signs.shape != magnitudes.shape or signs.ndim != 1:
            raise InvalidArgumentError("signs and magnitudes must be 1-D and equally long")
        if not MIN_EXPONENT <= int(self.shared_exponent) <= MAX_EXPONENT:
            raise InvalidArgumentError(f"shared exponent {self.shared_exponent} out of range")
        if magnitudes.size and (magnitudes.min() < 0 or magnitudes.max() >= (1 << self.m)):
            raise InvalidArgumentError(f"magnitude does not fit in {self.m} bits")

    def __len__(self) -> int:
        return int(self.magnitudes.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BfpGroup):
            return NotImplemented
        return (self.m == other.m
                and int(self.shared_exponent) == int(other.shared_exponent)
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.magnitudes, other.magnitudes))

    __hash__ = None

    def signed(self) -> np.ndarray:
        return self.signs.astype(np.int64) * self.magnitudes

    def dequantize(self) -> np.ndarray:
        return dequantize_group(self)


@dataclass(frozen=True, eq=False)
class BfpBlock:
    """
    A batch of equally long groups. Leading axes index groups, the last axis elements;
    `exponents` carries only the leading axes.
    """
    exponents: np.ndarray
    signs: np.ndarray
    magnitudes: np.ndarray
    m: int

    @property
    def lead_shape(self) -> Tuple[int, ...]:
        return tuple(self.exponents.shape)

    @property
    def length(self) -> int:
        return int(self.signs.shape[-1])

    def __getitem__(self, index) -> "BfpBlock":
        return BfpBlock(self.exponents[index], self.signs[index], self.magnitudes[index], self.m)

    def group(self, *index) -> BfpGroup:
        return BfpGroup(int(self.exponents[index]), self.signs[index], self.magnitudes[index], self.m)

    def signed(self) -> np.ndarray:
        return self.signs.astype(np.int64) * self.magnitudes

    def dequantize(self) -> np.ndarray:
        shifts = (self.exponents - (self.m - 1)).astype(np.int32)[..., None]
        return np.ldexp(self.signed().astype(np.float64), shifts)

    def truncate(self, m_new: int) -> "BfpBlock":
        if not 1 <= m_new < self.m:
            raise InvalidArgumentError(f"cannot truncate {self.m}-bit mantissas to {m_new} bits")
        return BfpBlock(self.exponents.copy(), self.signs.copy(), self.magnitudes >> (self.m - m_new), m_new)

    def bitwise_equal(self, other: "BfpBlock") -> bool:
        return (self.m == other.m
                and np.array_equal(self.exponents, other.exponents)
                and np.array_equal(self.signs, other.signs)
                and np.array_equal(self.magnitudes, other.magnitudes))

    @staticmethod
    def stack(blocks: Sequence["BfpBlock"], axis: int = 0) -> "BfpBlock":
        if not blocks:
            raise EmptyInputError("nothing to stack")
        widths = {b.m for b in blocks}
        if len(widths) != 1:
            raise InvalidArgumentError(f"cannot stack blocks of different widths {sorted(widths)}")
        return BfpBlock(np.stack([b.exponents for b in blocks], axis=axis),
                        np.stack([b.signs for b in blocks], axis=axis),
                        np.stack([b.magnitudes for b in blocks], axis=axis),
                        blocks[0].m)


def element_exponents(values: np.ndarray) -> np.ndarray:
    """Unbiased FP16 exponent of each element; zeros and subnormals report MIN_EXPONENT."""
    _, exps = np.frexp(np.abs(values))
    return np.where(values != 0, np.maximum(exps.astype(np.int64) - 1, MIN_EXPONENT), MIN_EXPONENT)


def align_to_exponent(values: np.ndarray, shared: np.ndarray, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-shift and truncate |values| onto the grid 2**(shared - (m-1))."""
    shifts = (m - 1 - np.asarray(shared)).astype(np.int32)[..., None]
    magnitudes = np.floor(np.ldexp(np.abs(values), shifts)).astype(np.int64)
    signs = np.where(values < 0, -1, 1).astype(np.int8)
    return signs, magnitudes


def convert_blocks(values: np.ndarray, m: int) -> BfpBlock:
    """
    Convert FP16-valued data grouped along the last axis.

    Callers are expected to pass values already validated by `to_half_array`.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0 or values.shape[-1] == 0:
        raise EmptyInputError("cannot convert an empty group")
    shared = element_exponents(values).max(axis=-1)
    signs, magnitudes = align_to_exponent(values, shared, m)
    return BfpBlock(shared.astype(np.int64), signs, magnitudes, m)


def convert_group(values, cfg: BfpConfig) -> BfpGroup:
    """
    FP16 -> BFP for a single group: shared exponent is the largest element exponent,
    mantissas are aligned to it and truncated toward zero.

    Raises:
        EmptyInputError: no values
        InvalidValueError: NaN/Inf input
        LayoutError: more values than the configured group size
    """
    if isinstance(values, (list, tuple)) and len(values) == 0:
        raise EmptyInputError("cannot convert an empty group")
    halves = to_half_array(values).ravel()
    if halves.size == 0:
        raise EmptyInputError("cannot convert an empty group")
    if halves.size > cfg.group_size:
        raise LayoutError(f"{halves.size} values exceed group size {cfg.group_size}")
    return convert_blocks(halves, cfg.m).group()


def dequantize_group(group: BfpGroup) -> np.ndarray:
    return np.ldexp(group.signed().astype(np.float64), int(group.shared_exponent) - (group.m - 1))


def truncate_mantissas(group: BfpGroup, m_new: int) -> BfpGroup:
    if not 1 <= m_new < group.m:
        raise InvalidArgumentError(f"cannot truncate {group.m}-bit mantissas to {m_new} bits")
    return BfpGroup(group.shared_exponent, group.signs.copy(), group.magnitudes >> (group.m - m_new), m_new)


def split_mantissa(sign: int, magnitude: int) -> Tuple[int, int, int]:
    """
    Split an 8-bit magnitude into high and low nibbles; the sign goes to both halves.
    magnitude == hi * 16 + lo.
    """
    if not 0 <= int(magnitude) < NIBBLE * NIBBLE:
        raise InvalidArgumentError(f"magnitude {magnitude} does not fit in 8 bits")
    hi, lo = divmod(int(magnitude), NIBBLE)
    return sign, hi, lo


def split_magnitudes(magnitudes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return magnitudes >> 4, magnitudes & (NIBBLE - 1)


def fake_quantize(x, cfg: BfpConfig, axis: Union[str, GroupAxis] = GroupAxis.PER_TOKEN) -> np.ndarray:
    """
    Dequantized BFP image of a 2-D tensor (tokens x channels).

    Per-token groups span consecutive channels and need C % group_size == 0;
    per-channel groups span consecutive tokens and the trailing tokens form a shorter group.
    """
    axis = GroupAxis.parse(axis)
    halves = to_half_array(x)
    if halves.ndim != 2:
        raise LayoutError(f"expected a 2-D tensor, got shape {halves.shape}")
    work = halves if axis is GroupAxis.PER_TOKEN else halves.T
    rows, cols = work.shape
    g = cfg.group_size
    if axis is GroupAxis.PER_TOKEN and cols % g:
        raise LayoutError(f"{cols} channels is not a multiple of group size {g}")
    if rows == 0 or cols == 0:
        return halves.copy()
    padded = np.pad(work, ((0, 0), (0, (-cols) % g)))
    image = convert_blocks(padded.reshape(rows, -1, g), cfg.m).dequantize().reshape(rows, -1)[:, :cols]
    return image if axis is GroupAxis.PER_TOKEN else image.T


def quantization_error(x, cfg: BfpConfig, axis: Union[str, GroupAxis] = GroupAxis.PER_TOKEN) -> Dict[str, float]:
    """
    Error of the BFP round trip against the FP16 carrier of x.

    Returns:
        dict: mse, max_abs, max_rel (relative to each nonzero element)
    """
    reference = to_half_array(x)
    error = np.abs(reference - fake_quantize(reference, cfg, axis))
    nonzero = reference != 0
    max_rel = float(np.max(error[nonzero] / np.abs(reference[nonzero]))) if nonzero.any() else 0.0
    metrics = {
        "mse": float(np.mean(error ** 2)) if error.size else 0.0,
        "max_abs": float(error.max()) if error.size else 0.0,
        "max_rel": max_rel,
    }
    logger.debug(f"📊 g={cfg.group_size} m={cfg.m} {axis}: {metrics}")
    return metrics


def bits_per_element(m: int, group_size: int = 32, count_shared_exponent: bool = True) -> Fraction:
    """Storage cost of one element: sign + m magnitude bits (+ the amortised 5-bit exponent)."""
    bits = Fraction(1 + m)
    if count_shared_exponent:
        bits += Fraction(EXPONENT_BITS, group_size)
    return bits
