# models/dataflow.py
# External-memory-access model of tiled GEMM: column-first / row-first output flows and policy selection

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, Optional, Set, Tuple, Union

import pandas as pd
from loguru import logger

from .errors import ConfigError, InvalidArgumentError, TilingError

HBM_PJ_PER_BIT = 3.9

Bits = Union[int, float, Fraction]


class DataflowPolicy(str, Enum):
    COLUMN_FIRST = "column_first"
    ROW_FIRST = "row_first"

    @classmethod
    def parse(cls, text: Union[str, "DataflowPolicy"]) -> Optional["DataflowPolicy"]:
        """'auto' (or None) means let `choose_policy` decide."""
        if text is None or isinstance(text, DataflowPolicy):
            return text
        aliases = {"auto": None, "col": cls.COLUMN_FIRST, "column": cls.COLUMN_FIRST,
                   "column_first": cls.COLUMN_FIRST, "row": cls.ROW_FIRST, "row_first": cls.ROW_FIRST}
        try:
            return aliases[str(text).lower()]
        except KeyError:
            raise ConfigError(f"unknown dataflow policy: {text}")


@dataclass(frozen=True)
class GemmShape:
    """C (M x N) = A (M x K) . B (K x N), tiled into tile_m x tile_n output tiles."""
    M: int
    K: int
    N: int
    tile_m: int
    tile_n: int
    bits_a: Bits = 16
    bits_b: Bits = 16

    def __post_init__(self):
        for name in ("M", "K", "N", "tile_m", "tile_n"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.bits_a < 0 or self.bits_b < 0:
            raise InvalidArgumentError("bits per element must be non-negative")
        if self.M % self.tile_m or self.N % self.tile_n:
            raise TilingError(f"tiles {self.tile_m}x{self.tile_n} do not divide {self.M}x{self.N}")

    @property
    def row_tiles(self) -> int:
        return self.M // self.tile_m

    @property
    def column_tiles(self) -> int:
        return self.N // self.tile_n


def ema_column_first(s: GemmShape) -> int:
    """B column strips stay on chip while every A row tile streams past: (N/n)·M·K + K·N."""
    return s.column_tiles * s.M * s.K + s.K * s.N


def ema_row_first(s: GemmShape) -> int:
    """A row strips stay on chip while every B column tile streams past: (M/m)·K·N + M·K."""
    return s.row_tiles * s.K * s.N + s.M * s.K


def _operand_elements(s: GemmShape, policy: DataflowPolicy) -> Tuple[int, int]:
    if policy is DataflowPolicy.COLUMN_FIRST:
        return s.column_tiles * s.M * s.K, s.K * s.N
    return s.M * s.K, s.row_tiles * s.K * s.N


def energy_estimate(total_bits: Bits, pj_per_bit: float = HBM_PJ_PER_BIT) -> float:
    if total_bits < 0:
        raise InvalidArgumentError("bit count must be non-negative")
    return float(total_bits) * pj_per_bit


@dataclass
class EmaReport:
    shape: GemmShape
    chosen_policy: DataflowPolicy
    elements_a: int
    elements_b: int
    column_first: int
    row_first: int
    output_elements: int = 0
    bits_out: Bits = 16
    pj_per_bit: float = HBM_PJ_PER_BIT

    @property
    def total_elements(self) -> int:
        return self.elements_a + self.elements_b + self.output_elements

    @property
    def total_bits(self) -> Fraction:
        return (Fraction(self.elements_a) * Fraction(self.shape.bits_a)
                + Fraction(self.elements_b) * Fraction(self.shape.bits_b)
                + Fraction(self.output_elements) * Fraction(self.bits_out))

    @property
    def energy_pj(self) -> float:
        return energy_estimate(self.total_bits, self.pj_per_bit)

    def to_dict(self) -> Dict:
        return {
            "policy": self.chosen_policy.value,
            "elements_A": self.elements_a,
            "elements_B": self.elements_b,
            "output_elements": self.output_elements,
            "total_elements": self.total_elements,
            "total_bits": float(self.total_bits),
            "energy_pJ": self.energy_pj,
            "column_first": self.column_first,
            "row_first": self.row_first,
        }


def choose_policy(s: GemmShape, policy: Union[str, DataflowPolicy, None] = None,
                  include_output: bool = False, bits_out: Bits = 16,
                  pj_per_bit: float = HBM_PJ_PER_BIT) -> EmaReport:
    """
    Pick the output flow with fewer external accesses (ties go to column-first), or cost a
    forced policy. Output write-back (M·N elements) is only counted with include_output.
    """
    column_first, row_first = ema_column_first(s), ema_row_first(s)
    forced = DataflowPolicy.parse(policy)
    if forced is None:
        forced = DataflowPolicy.ROW_FIRST if row_first < column_first else DataflowPolicy.COLUMN_FIRST
    elements_a, elements_b = _operand_elements(s, forced)
    report = EmaReport(s, forced, elements_a, elements_b, column_first, row_first,
                       s.M * s.N if include_output else 0, bits_out, pj_per_bit)
    logger.debug(f"📊 {s.M}x{s.K}x{s.N}: column-first {column_first}, row-first {row_first} -> {forced.value}")
    return report


def simulate_trace(s: GemmShape, policy: Union[str, DataflowPolicy]) -> int:
    """
    Walk the tile loops and count every element fetched from external memory. The outer
    operand's strip is resident for its whole strip loop; inner tiles are fetched on use
    and dropped afterwards.
    """
    policy = DataflowPolicy.parse(policy)
    if policy is None:
        policy = choose_policy(s).chosen_policy
    resident: Set[Tuple[str, int]] = set()
    fetched = 0

    def fetch(tile: Tuple[str, int], elements: int, keep: bool):
        nonlocal fetched
        if tile in resident:
            return
        fetched += elements
        if keep:
            resident.add(tile)

    if policy is DataflowPolicy.COLUMN_FIRST:
        for j in range(s.column_tiles):
            for i in range(s.row_tiles):
                fetch(("B", j), s.K * s.tile_n, keep=True)
                fetch(("A", i), s.tile_m * s.K, keep=False)
            resident.discard(("B", j))
    else:
        for i in range(s.row_tiles):
            for j in range(s.column_tiles):
                fetch(("A", i), s.tile_m * s.K, keep=True)
                fetch(("B", j), s.K * s.tile_n, keep=False)
            resident.discard(("A", i))
    return fetched


def ema_sweep(K: int, N: int, tile_m: int, tile_n: int, token_counts: Iterable[int],
              bits_a: Bits = 16, bits_b: Bits = 16, pj_per_bit: float = HBM_PJ_PER_BIT) -> pd.DataFrame:
    """
    Policy decision across workload sizes M (decode at M=1 up to long prefills). Tiles
    shrink to the largest divisor of M and N that fits, so any token count is accepted.
    """
    rows = []
    for M in token_counts:
        shape = GemmShape(M, K, N, math.gcd(M, tile_m), math.gcd(N, tile_n), bits_a, bits_b)
        report = choose_policy(shape, pj_per_bit=pj_per_bit)
        rows.append({"M": M, **report.to_dict()})
    frame = pd.DataFrame(rows)
    logger.info(f"📊 EMA sweep over {len(frame)} workload sizes")
    return frame
