# models/kvcache.py
# Precision-regioned BFP KV cache: asymmetric bit allocation, demotion by truncation, storage accounting

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from .errors import ConfigError, InvariantViolationError, LayoutError, RegionError
from .grouping import GroupedOperand, IncrementalVState
from .numerics import (
    EXPONENT_BITS,
    MAX_MANTISSA_BITS,
    BfpBlock,
    BfpConfig,
    convert_blocks,
    to_half_array,
)

FP16_BITS = 16


@dataclass(frozen=True)
class KvPolicy:
    """Initial and local windows stay at m_high, everything in between is demoted to m_low."""
    initial_tokens: int = 32
    local_tokens: int = 64
    m_high: int = 8
    m_low: int = 4
    group_size: int = 32
    count_shared_exponent: bool = True

    def __post_init__(self):
        if self.initial_tokens < 0 or self.local_tokens < 0:
            raise ConfigError("window sizes must be >= 0")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if not 1 <= self.m_low <= self.m_high <= MAX_MANTISSA_BITS:
            raise ConfigError(f"need 1 <= m_low <= m_high <= {MAX_MANTISSA_BITS}, got {self.m_low}, {self.m_high}")

    @classmethod
    def uniform(cls, m: int, group_size: int = 32, count_shared_exponent: bool = False) -> "KvPolicy":
        return cls(0, 0, m, m, group_size, count_shared_exponent)

    @property
    def window_tokens(self) -> int:
        return self.initial_tokens + self.local_tokens

    @property
    def local_blocks(self) -> int:
        return -(-self.local_tokens // self.group_size)

    @property
    def initial_blocks(self) -> int:
        """Full V groups lying entirely inside the initial window."""
        return self.initial_tokens // self.group_size

    def k_tags(self, tokens: int) -> np.ndarray:
        """Mantissa width of every K token for a cache holding `tokens` tokens."""
        t = np.arange(tokens)
        high = (t < self.initial_tokens) | (t >= tokens - self.local_tokens)
        return np.where(high, self.m_high, self.m_low).astype(np.int64)

    def v_tags(self, tokens: int) -> np.ndarray:
        """Width of every committed V group, the residual (if any) last and always m_high."""
        full = tokens // self.group_size
        b = np.arange(full)
        high = (b < self.initial_blocks) | (b >= full - self.local_blocks)
        tags = np.where(high, self.m_high, self.m_low).astype(np.int64)
        if tokens % self.group_size:
            tags = np.append(tags, self.m_high)
        return tags

    def to_dict(self) -> Dict:
        return {
            "initial_tokens": self.initial_tokens,
            "local_tokens": self.local_tokens,
            "m_high": self.m_high,
            "m_low": self.m_low,
            "group_size": self.group_size,
            "count_shared_exponent": self.count_shared_exponent,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "KvPolicy":
        known = {k: data[k] for k in cls().to_dict() if k in data}
        return cls(**known)


@dataclass
class KvRegion:
    """Stored groups of a token range; K per token, V per group (V groups span tokens and are returned whole)."""
    start: int
    stop: int
    k_blocks: List[BfpBlock]
    k_tags: np.ndarray
    v_blocks: List[BfpBlock]
    v_spans: List[Tuple[int, int]]
    v_tags: np.ndarray


class KvCacheStore:
    """
    K rows are converted per token (groups along channels) at m_high and demoted to m_low
    by mantissa truncation once they leave the local window. V goes through the incremental
    residual protocol; committed groups are demoted the same way once older than the last
    ceil(local / group_size) groups, unless they lie inside the initial window.

    FP16 originals of high-precision entries are kept until demotion so the demoted entry
    can be checked against a direct m_low conversion (`verify_demotion`).
    """

    def __init__(self, channels: int, policy: Optional[KvPolicy] = None, verify_demotion: bool = False):
        self.policy = policy or KvPolicy()
        if channels < 1 or channels % self.policy.group_size:
            raise LayoutError(f"{channels} channels is not a multiple of group size {self.policy.group_size}")
        self.channels = channels
        self.verify_demotion = verify_demotion
        self.high_cfg = BfpConfig(self.policy.group_size, self.policy.m_high)
        self._k_blocks: List[BfpBlock] = []
        self._k_originals: Dict[int, np.ndarray] = {}
        self._v_state = IncrementalVState.empty(channels, self.high_cfg)
        self._v_blocks: List[BfpBlock] = []
        self._v_originals: Dict[int, np.ndarray] = {}
        self._v_pending: List[np.ndarray] = []
        self.demotions = 0

    @property
    def token_count(self) -> int:
        return len(self._k_blocks)

    def __len__(self) -> int:
        return self.token_count

    @property
    def v_state(self) -> IncrementalVState:
        return self._v_state

    def append(self, k_row, v_row) -> "KvCacheStore":
        g = self.policy.group_size
        k = to_half_array(k_row).ravel()
        v = to_half_array(v_row).ravel()
        if k.size != self.channels or v.size != self.channels:
            raise LayoutError(f"K/V rows have {k.size}/{v.size} channels, expected {self.channels}")

        token = self.token_count
        self._k_blocks.append(convert_blocks(k.reshape(-1, g), self.policy.m_high))
        self._k_originals[token] = k
        exiting = token - self.policy.local_tokens
        if exiting >= self.policy.initial_tokens:
            self._demote_k(exiting)
        elif exiting >= 0:
            self._k_originals.pop(exiting, None)

        self._v_pending.append(v)
        committed = self._v_state.append(v)
        if committed is not None:
            index = len(self._v_blocks)
            self._v_blocks.append(committed)
            self._v_originals[index] = np.vstack(self._v_pending)
            self._v_pending = []
            exiting_block = index - self.policy.local_blocks
            if exiting_block >= self.policy.initial_blocks:
                self._demote_v(exiting_block)
            elif exiting_block >= 0:
                self._v_originals.pop(exiting_block, None)
        return self

    def _demote_k(self, token: int):
        original = self._k_originals.pop(token)
        if self.policy.m_low == self.policy.m_high:
            return
        demoted = self._k_blocks[token].truncate(self.policy.m_low)
        if self.verify_demotion:
            direct = convert_blocks(original.reshape(-1, self.policy.group_size), self.policy.m_low)
            if not demoted.bitwise_equal(direct):
                raise InvariantViolationError(f"demoted K token {token} differs from direct conversion")
        self._k_blocks[token] = demoted
        self.demotions += 1

    def _demote_v(self, index: int):
        original = self._v_originals.pop(index)
        if self.policy.m_low == self.policy.m_high:
            return
        demoted = self._v_blocks[index].truncate(self.policy.m_low)
        if self.verify_demotion:
            direct = convert_blocks(original.T, self.policy.m_low)
            if not demoted.bitwise_equal(direct):
                raise InvariantViolationError(f"demoted V group {index} differs from direct conversion")
        self._v_blocks[index] = demoted
        self.demotions += 1
        logger.debug(f"📊 V group {index} demoted to {self.policy.m_low} bits")

    def k_tags(self) -> np.ndarray:
        return np.array([b.m for b in self._k_blocks], dtype=np.int64)

    def v_tags(self) -> np.ndarray:
        tags = [b.m for b in self._v_blocks]
        if self._v_state.residual_view is not None:
            tags.append(self._v_state.residual_view.m)
        return np.array(tags, dtype=np.int64)

    def k_blocks(self) -> List[BfpBlock]:
        return list(self._k_blocks)

    def v_blocks(self) -> List[BfpBlock]:
        """Committed V groups followed by the current residual view (each lead shape (C,))."""
        blocks = list(self._v_blocks)
        if self._v_state.residual_view is not None:
            blocks.append(self._v_state.residual_view)
        return blocks

    def read_region(self, start: int, stop: int) -> KvRegion:
        if not 0 <= start <= stop <= self.token_count:
            raise RegionError(f"range [{start}, {stop}) outside cache of {self.token_count} tokens")
        g = self.policy.group_size
        v_blocks, v_spans, v_tags = [], [], []
        for index, block in enumerate(self.v_blocks()):
            lo, hi = index * g, index * g + block.length
            if lo < stop and hi > start:
                v_blocks.append(block)
                v_spans.append((lo, hi))
                v_tags.append(block.m)
        return KvRegion(start, stop, self._k_blocks[start:stop], self.k_tags()[start:stop],
                        v_blocks, v_spans, np.array(v_tags, dtype=np.int64))

    def key_segments(self, start: int, stop: int, channel_blocks: slice = slice(None)) -> List[Tuple[int, int, GroupedOperand]]:
        """
        Keys of [start, stop) as (keys x channels) operands, split where the precision tag
        changes so that each operand has one width per block.
        """
        region = self.read_region(start, stop)
        segments = []
        begin = 0
        for i in range(1, len(region.k_blocks) + 1):
            if i == len(region.k_blocks) or region.k_tags[i] != region.k_tags[begin]:
                rows = BfpBlock.stack(region.k_blocks[begin:i])
                blocks = [rows[:, j] for j in range(rows.lead_shape[1])][channel_blocks]
                segments.append((start + begin, start + i, GroupedOperand(blocks)))
                begin = i
        return segments

    def value_operand(self, channels: slice = slice(None)) -> GroupedOperand:
        """All cached values as a (channels x tokens) operand reducing over tokens."""
        return GroupedOperand([block[channels] for block in self.v_blocks()])

    def dequantized_keys(self) -> np.ndarray:
        if not self._k_blocks:
            return np.zeros((0, self.channels))
        return np.vstack([b.dequantize().ravel() for b in self._k_blocks])

    def dequantized_values(self) -> np.ndarray:
        blocks = self.v_blocks()
        if not blocks:
            return np.zeros((0, self.channels))
        return np.vstack([b.dequantize().T for b in blocks])


def append_kv(cache: KvCacheStore, k_row, v_row) -> KvCacheStore:
    return cache.append(k_row, v_row)


def _group_cost(elements: int, m: int, groups: int, policy: KvPolicy) -> int:
    bits = elements * (1 + m)
    if policy.count_shared_exponent:
        bits += groups * EXPONENT_BITS
    return bits


def storage_bits(cache: KvCacheStore) -> int:
    """Entry-by-entry bit count of everything the cache holds (K and V)."""
    policy = cache.policy
    total = 0
    for block in cache.k_blocks():
        total += _group_cost(block.signs.size, block.m, int(np.prod(block.lead_shape)), policy)
    for block in cache.v_blocks():
        total += _group_cost(block.signs.size, block.m, int(np.prod(block.lead_shape)), policy)
    return total


def storage_bits_closed(tokens: int, channels: int, policy: KvPolicy) -> int:
    """Closed-form counterpart of `storage_bits` for a cache of `tokens` tokens."""
    if tokens < 0:
        raise ConfigError("token count must be >= 0")
    g = policy.group_size
    groups_per_token = channels // g

    k_high = min(tokens, policy.window_tokens)
    k_bits = (_group_cost(k_high * channels, policy.m_high, k_high * groups_per_token, policy)
              + _group_cost((tokens - k_high) * channels, policy.m_low, (tokens - k_high) * groups_per_token, policy))

    full, residual = divmod(tokens, g)
    v_high = min(full, policy.initial_blocks + policy.local_blocks)
    v_bits = (_group_cost(v_high * g * channels, policy.m_high, v_high * channels, policy)
              + _group_cost((full - v_high) * g * channels, policy.m_low, (full - v_high) * channels, policy))
    if residual:
        v_bits += _group_cost(residual * channels, policy.m_high, channels, policy)
    return k_bits + v_bits


class HighPrecisionShare(NamedTuple):
    k_fraction: Fraction
    v_fraction: Fraction
    all_high: bool


def high_precision_fraction(tokens: int, policy: KvPolicy) -> HighPrecisionShare:
    """
    Share of tokens held at m_high: per token for K, at group granularity for V.
    Caches no longer than the two windows are entirely high precision.
    """
    if tokens <= policy.window_tokens:
        return HighPrecisionShare(Fraction(1), Fraction(1), True)
    g = policy.group_size
    full, residual = divmod(tokens, g)
    v_high = min(full, policy.initial_blocks + policy.local_blocks) * g + residual
    return HighPrecisionShare(Fraction(policy.window_tokens, tokens), Fraction(v_high, tokens), False)


@dataclass
class StorageReport:
    tokens: int
    channels: int
    k_bits: int
    v_bits: int
    fp16_bits: int
    high_share: HighPrecisionShare
    policy: KvPolicy = field(default_factory=KvPolicy)

    @property
    def total_bits(self) -> int:
        return self.k_bits + self.v_bits

    @property
    def bits_per_element(self) -> Fraction:
        elements = 2 * self.tokens * self.channels
        return Fraction(self.total_bits, elements) if elements else Fraction(0)

    @property
    def size_fraction(self) -> Fraction:
        return Fraction(self.total_bits, self.fp16_bits) if self.fp16_bits else Fraction(0)

    @property
    def reduction(self) -> Fraction:
        return 1 - self.size_fraction

    @property
    def compression_ratio(self) -> Fraction:
        return Fraction(self.fp16_bits, self.total_bits) if self.total_bits else Fraction(0)

    def to_dict(self) -> Dict:
        return {
            "tokens": self.tokens,
            "channels": self.channels,
            "k_bits": self.k_bits,
            "v_bits": self.v_bits,
            "total_bits": self.total_bits,
            "fp16_bits": self.fp16_bits,
            "bits_per_element": float(self.bits_per_element),
            "size_fraction": float(self.size_fraction),
            "reduction": float(self.reduction),
            "compression_ratio": float(self.compression_ratio),
            "k_high_fraction": float(self.high_share.k_fraction),
            "v_high_fraction": float(self.high_share.v_fraction),
            "all_high": self.high_share.all_high,
            "policy": self.policy.to_dict(),
        }


def storage_report(tokens: int, channels: int, policy: Optional[KvPolicy] = None) -> StorageReport:
    policy = policy or KvPolicy()
    g = policy.group_size
    groups_per_token = channels // g
    high = min(tokens, policy.window_tokens)
    k_bits = (_group_cost(high * channels, policy.m_high, high * groups_per_token, policy)
              + _group_cost((tokens - high) * channels, policy.m_low, (tokens - high) * groups_per_token, policy))
    total = storage_bits_closed(tokens, channels, policy)
    report = StorageReport(tokens, channels, k_bits, total - k_bits, FP16_BITS * 2 * tokens * channels,
                           high_precision_fraction(tokens, policy), policy)
    logger.info(f"📊 KV storage T={tokens} C={channels}: {float(report.bits_per_element):.4f} bits/element, "
                f"{float(report.compression_ratio):.3f}x vs FP16")
    return report
