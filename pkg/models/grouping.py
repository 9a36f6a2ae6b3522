# models/grouping.py
# Tensor-to-group layout, the incremental V residual protocol and the streaming converters

from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import EmptyInputError, LayoutError
from .numerics import (
    MIN_EXPONENT,
    BfpBlock,
    BfpConfig,
    BfpGroup,
    GroupAxis,
    align_to_exponent,
    convert_blocks,
    element_exponents,
    to_half_array,
)

CONVERTER_LANES = 8


@dataclass(eq=False)
class GroupedOperand:
    """
    GEMM operand seen as rows of groups along the inner (reduction) dimension.
    blocks[j] holds the j-th span of the inner dimension for every row (lead shape (rows,)).
    Each block carries its own mantissa width, which is how precision tags reach the PE.
    """
    blocks: List[BfpBlock]

    @property
    def rows(self) -> int:
        return int(self.blocks[0].lead_shape[0]) if self.blocks else 0

    @property
    def inner(self) -> int:
        return sum(b.length for b in self.blocks)

    @property
    def spans(self) -> List[int]:
        return [b.length for b in self.blocks]

    @property
    def widths(self) -> List[int]:
        return [b.m for b in self.blocks]

    def select_rows(self, rows) -> "GroupedOperand":
        return GroupedOperand([b[rows] for b in self.blocks])

    def select_blocks(self, start: int, stop: int) -> "GroupedOperand":
        return GroupedOperand(self.blocks[start:stop])

    def dequantize(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros((0, 0))
        return np.concatenate([b.dequantize() for b in self.blocks], axis=-1)

    @staticmethod
    def concat_rows(operands: Sequence["GroupedOperand"]) -> "GroupedOperand":
        """Stack operands with identical block spans row-wise."""
        spans = {tuple(op.spans) for op in operands}
        if len(spans) != 1:
            raise LayoutError("operands have different inner spans")
        blocks = []
        for j in range(len(operands[0].blocks)):
            parts = [op.blocks[j] for op in operands]
            widths = {p.m for p in parts}
            if len(widths) != 1:
                raise LayoutError(f"inner block {j} mixes mantissa widths {sorted(widths)}")
            blocks.append(BfpBlock(np.concatenate([p.exponents for p in parts]),
                                   np.concatenate([p.signs for p in parts]),
                                   np.concatenate([p.magnitudes for p in parts]),
                                   parts[0].m))
        return GroupedOperand(blocks)


@dataclass(eq=False)
class BfpTensor:
    """
    T x C tensor in BFP form.

    per_token:   blocks lead shape (T, C // g); group (t, b) spans channels [b*g, (b+1)*g) of token t
    per_channel: blocks lead shape (T // g, C); group (b, c) spans tokens [b*g, (b+1)*g) of channel c,
                 residual lead shape (C,) holds the trailing T % g tokens
    """
    axis: GroupAxis
    shape: Tuple[int, int]
    cfg: BfpConfig
    blocks: BfpBlock
    residual: Optional[BfpBlock] = None

    @property
    def tokens(self) -> int:
        return self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[1]

    @property
    def m(self) -> int:
        return self.blocks.m

    def group(self, i: int, j: int) -> BfpGroup:
        return self.blocks.group(i, j)

    def residual_group(self, channel: int) -> BfpGroup:
        if self.residual is None:
            raise LayoutError("tensor has no residual group")
        return self.residual.group(channel)

    def iter_groups(self) -> Iterator[BfpGroup]:
        """Row-major over the group index, residual groups last."""
        rows, cols = self.blocks.lead_shape
        for i in range(rows):
            for j in range(cols):
                yield self.blocks.group(i, j)
        if self.residual is not None:
            for c in range(self.residual.lead_shape[0]):
                yield self.residual.group(c)

    @property
    def group_count(self) -> int:
        count = int(np.prod(self.blocks.lead_shape))
        if self.residual is not None:
            count += self.residual.lead_shape[0]
        return count

    def dequantize(self) -> np.ndarray:
        return dequantize_tensor(self)

    def truncate(self, m_new: int) -> "BfpTensor":
        residual = self.residual.truncate(m_new) if self.residual is not None else None
        return BfpTensor(self.axis, self.shape, self.cfg.with_mantissa(m_new), self.blocks.truncate(m_new), residual)

    def bitwise_equal(self, other: "BfpTensor") -> bool:
        if self.axis != other.axis or tuple(self.shape) != tuple(other.shape):
            return False
        if (self.residual is None) != (other.residual is None):
            return False
        if self.residual is not None and not self.residual.bitwise_equal(other.residual):
            return False
        return self.blocks.bitwise_equal(other.blocks)

    def as_operand(self) -> GroupedOperand:
        """
        per_token tensors become (tokens x channels) operands reducing over channels,
        per_channel tensors become (channels x tokens) operands reducing over tokens.
        """
        if self.axis is GroupAxis.PER_TOKEN:
            return GroupedOperand([self.blocks[:, j] for j in range(self.blocks.lead_shape[1])])
        blocks = [self.blocks[j] for j in range(self.blocks.lead_shape[0])]
        if self.residual is not None:
            blocks.append(self.residual)
        return GroupedOperand(blocks)


def group_tensor(x, axis: Union[str, GroupAxis], cfg: BfpConfig) -> BfpTensor:
    """
    Partition a T x C tensor into BFP groups.

    Raises:
        LayoutError: not 2-D, or per_token with C not a multiple of the group size
        InvalidValueError: NaN/Inf input
    """
    axis = GroupAxis.parse(axis)
    halves = to_half_array(x)
    if halves.ndim != 2:
        raise LayoutError(f"expected a 2-D tensor, got shape {halves.shape}")
    tokens, channels = halves.shape
    g = cfg.group_size
    if axis is GroupAxis.PER_TOKEN:
        if channels % g:
            raise LayoutError(f"{channels} channels is not a multiple of group size {g}")
        blocks = convert_blocks(halves.reshape(tokens, channels // g, g), cfg.m)
        return BfpTensor(axis, (tokens, channels), cfg, blocks)

    full = tokens // g
    main = halves[:full * g].reshape(full, g, channels).transpose(0, 2, 1)
    blocks = convert_blocks(main, cfg.m)
    residual = None
    if tokens % g:
        residual = convert_blocks(halves[full * g:].T, cfg.m)
    return BfpTensor(axis, (tokens, channels), cfg, blocks, residual)


def dequantize_tensor(tensor: BfpTensor) -> np.ndarray:
    tokens, channels = tensor.shape
    if tensor.axis is GroupAxis.PER_TOKEN:
        return tensor.blocks.dequantize().reshape(tokens, channels)
    full = tensor.blocks.lead_shape[0]
    main = tensor.blocks.dequantize().transpose(0, 2, 1).reshape(full * tensor.cfg.group_size, channels)
    if tensor.residual is None:
        return main
    return np.vstack([main, tensor.residual.dequantize().T])


@dataclass(eq=False)
class IncrementalVState:
    """
    V cache conversion state. Rows are buffered until a full group of tokens exists;
    meanwhile `residual_view` is the residual re-encoded at its current size.
    """
    cfg: BfpConfig
    committed: BfpTensor
    residual_rows: np.ndarray
    residual_view: Optional[BfpBlock] = None

    @classmethod
    def empty(cls, channels: int, cfg: BfpConfig) -> "IncrementalVState":
        committed = group_tensor(np.zeros((0, channels)), GroupAxis.PER_CHANNEL, cfg)
        return cls(cfg, committed, np.zeros((0, channels)))

    @property
    def channels(self) -> int:
        return self.committed.channels

    @property
    def token_count(self) -> int:
        return self.committed.tokens + self.residual_rows.shape[0]

    def append(self, v_row) -> Optional[BfpBlock]:
        """
        Buffer one token. Returns the committed block (lead shape (C,)) when the residual
        fills up, otherwise None.
        """
        row = to_half_array(v_row).ravel()
        if row.size != self.channels:
            raise LayoutError(f"V row has {row.size} channels, expected {self.channels}")
        self.residual_rows = np.vstack([self.residual_rows, row[None, :]])
        block = convert_blocks(self.residual_rows.T, self.cfg.m)
        if self.residual_rows.shape[0] < self.cfg.group_size:
            self.residual_view = block
            return None

        old = self.committed.blocks
        merged = BfpBlock(np.concatenate([old.exponents, block.exponents[None]]),
                          np.concatenate([old.signs, block.signs[None]]),
                          np.concatenate([old.magnitudes, block.magnitudes[None]]),
                          old.m)
        self.committed = BfpTensor(GroupAxis.PER_CHANNEL, (self.committed.tokens + self.cfg.group_size, self.channels),
                                   self.cfg, merged)
        self.residual_rows = np.zeros((0, self.channels))
        self.residual_view = None
        logger.debug(f"✅ V group committed, {self.committed.tokens} tokens in committed storage")
        return block

    def as_tensor(self) -> BfpTensor:
        """Committed groups plus the current residual view as one per-channel tensor."""
        return BfpTensor(GroupAxis.PER_CHANNEL, (self.token_count, self.channels), self.cfg,
                         self.committed.blocks, self.residual_view)


def append_token(state: IncrementalVState, v_row) -> IncrementalVState:
    state.append(v_row)
    return state


def comparator_tree_max(exponents: Sequence[int]) -> int:
    """Pairwise max reduction, one tree level per loop."""
    level = [int(e) for e in exponents]
    if not level:
        raise EmptyInputError("comparator tree needs at least one input")
    while len(level) > 1:
        if len(level) % 2:
            level.append(MIN_EXPONENT)
        level = [max(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


class TokenPathConverter:
    """
    Temporally serialised path for per-token activations: results of one PE row arrive one
    per step, a running max exponent is kept, and after group_size arrivals the buffered
    values are aligned to it.
    """

    def __init__(self, cfg: BfpConfig):
        self.cfg = cfg
        self._buffer: List[float] = []
        self._running_max = MIN_EXPONENT

    def push(self, value) -> Optional[BfpGroup]:
        half = to_half_array([value])[0]
        self._running_max = max(self._running_max, int(element_exponents(np.array([half]))[0]))
        self._buffer.append(half)
        if len(self._buffer) == self.cfg.group_size:
            return self._emit()
        return None

    def flush(self) -> Optional[BfpGroup]:
        return self._emit() if self._buffer else None

    def _emit(self) -> BfpGroup:
        signs, magnitudes = align_to_exponent(np.array(self._buffer), np.array(self._running_max), self.cfg.m)
        group = BfpGroup(self._running_max, signs, magnitudes, self.cfg.m)
        self._buffer = []
        self._running_max = MIN_EXPONENT
        return group


def stream_convert_token_path(values: Iterable, cfg: BfpConfig) -> Iterator[BfpGroup]:
    """Yield one group per group_size arrivals; a trailing partial group is flushed last."""
    converter = TokenPathConverter(cfg)
    for value in values:
        group = converter.push(value)
        if group is not None:
            yield group
    tail = converter.flush()
    if tail is not None:
        yield tail


def stream_convert_channel_path(batches: Iterable[Sequence], cfg: BfpConfig,
                                lanes: int = CONVERTER_LANES) -> BfpGroup:
    """
    Spatially parallel path for V-type activations: each batch holds the `lanes` results a
    PE column produces in one cycle. A comparator tree reduces each batch, the running max
    spans all batches of the group, then the group is aligned in lane-wide subgroups.
    """
    running_max = MIN_EXPONENT
    collected: List[np.ndarray] = []
    for batch in batches:
        values = to_half_array(batch).ravel()
        if values.size == 0 or values.size > lanes:
            raise LayoutError(f"batch of {values.size} results does not fit {lanes} lanes")
        running_max = max(running_max, comparator_tree_max(element_exponents(values)))
        collected.append(values)
    if not collected:
        raise EmptyInputError("no batches delivered")
    values = np.concatenate(collected)
    if values.size > cfg.group_size:
        raise LayoutError(f"{values.size} results exceed group size {cfg.group_size}")

    signs, magnitudes = [], []
    for start in range(0, values.size, lanes):
        s, mag = align_to_exponent(values[start:start + lanes], np.array(running_max), cfg.m)
        signs.append(s)
        magnitudes.append(mag)
    return BfpGroup(running_max, np.concatenate(signs), np.concatenate(magnitudes), cfg.m)
