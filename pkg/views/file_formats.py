# views/file_formats.py
# Binary codecs: HRMT dense tensors and HBFP block-floating-point tensors (little-endian)

import struct
from typing import Tuple, Union

import numpy as np
from loguru import logger

from models.errors import FormatError
from models.grouping import BfpTensor
from models.numerics import FP16_BIAS, MAX_EXPONENT, MAX_MANTISSA_BITS, MIN_EXPONENT, BfpBlock, BfpConfig, GroupAxis

TENSOR_MAGIC = b"HRMT"
BFP_MAGIC = b"HBFP"
FORMAT_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f2"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
DTYPE_NAMES = {"f16": 0, "f32": 1, "f64": 2}
AXIS_CODES = {GroupAxis.PER_TOKEN: 0, GroupAxis.PER_CHANNEL: 1}

_TENSOR_HEAD = struct.Struct("<4sII")
_BFP_HEAD = struct.Struct("<4sIIIIQQI")


# ---------------------------------------------------------------------------
# HRMT: magic, u32 version, u32 ndim, u64 dims[ndim], u32 dtype code, payload
# ---------------------------------------------------------------------------

def encode_tensor(array, dtype: Union[str, int] = "f32") -> bytes:
    code = DTYPE_NAMES[dtype] if isinstance(dtype, str) else int(dtype)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype {dtype}")
    data = np.ascontiguousarray(np.asarray(array), dtype=DTYPE_CODES[code])
    dims = struct.pack(f"<{data.ndim}Q", *data.shape)
    return _TENSOR_HEAD.pack(TENSOR_MAGIC, FORMAT_VERSION, data.ndim) + dims + struct.pack("<I", code) + data.tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _TENSOR_HEAD.size:
        raise FormatError("truncated tensor header")
    magic, version, ndim = _TENSOR_HEAD.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    offset = _TENSOR_HEAD.size
    if len(blob) < offset + 8 * ndim + 4:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    (code,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(f"payload is {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).copy()


def write_tensor(path: str, array, dtype: Union[str, int] = "f32") -> None:
    with open(path, "wb") as f:
        f.write(encode_tensor(array, dtype))
    logger.debug(f"✅ Wrote tensor {np.shape(array)} to {path}")


def read_tensor(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}")
    return decode_tensor(blob)


# ---------------------------------------------------------------------------
# HBFP: magic, u32 version, u32 axis, u32 group_size, u32 m, u64 T, u64 C,
# u32 residual length, then one record per group (full groups row-major,
# residual groups last): u8 biased exponent, packed signs, packed m-bit magnitudes
# ---------------------------------------------------------------------------

def _pack_records(block: BfpBlock) -> bytes:
    length, m = block.length, block.m
    exps = block.exponents.reshape(-1)
    if exps.size == 0:
        return b""
    signs = (block.signs.reshape(-1, length) < 0).astype(np.uint8)
    mags = block.magnitudes.reshape(-1, length)
    bits = ((mags[..., None] >> np.arange(m - 1, -1, -1)) & 1).astype(np.uint8).reshape(exps.size, length * m)
    records = np.hstack([
        (exps + FP16_BIAS).astype(np.uint8)[:, None],
        np.packbits(signs, axis=1),
        np.packbits(bits, axis=1),
    ])
    return records.tobytes()


def _record_size(length: int, m: int) -> int:
    return 1 + (length + 7) // 8 + (length * m + 7) // 8


def _unpack_records(blob: bytes, offset: int, count: int, length: int, m: int,
                    lead: Tuple[int, ...]) -> Tuple[BfpBlock, int]:
    size = _record_size(length, m)
    end = offset + count * size
    if end > len(blob):
        raise FormatError("truncated group records")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=offset, count=count * size).reshape(count, size)
    sign_bytes = (length + 7) // 8
    exps = raw[:, 0].astype(np.int64) - FP16_BIAS
    if exps.size and (exps.min() < MIN_EXPONENT or exps.max() > MAX_EXPONENT):
        raise FormatError("shared exponent byte out of range")
    signs = np.unpackbits(raw[:, 1:1 + sign_bytes], axis=1)[:, :length]
    bits = np.unpackbits(raw[:, 1 + sign_bytes:], axis=1)[:, :length * m].reshape(count, length, m)
    weights = 1 << np.arange(m - 1, -1, -1, dtype=np.int64)
    mags = (bits.astype(np.int64) * weights).sum(axis=-1)
    block = BfpBlock(exps.reshape(lead),
                     np.where(signs == 1, -1, 1).astype(np.int8).reshape(lead + (length,)),
                     mags.reshape(lead + (length,)), m)
    return block, end


def encode_bfp(tensor: BfpTensor) -> bytes:
    residual_len = tensor.residual.length if tensor.residual is not None else 0
    head = _BFP_HEAD.pack(BFP_MAGIC, FORMAT_VERSION, AXIS_CODES[tensor.axis], tensor.cfg.group_size,
                          tensor.m, tensor.tokens, tensor.channels, residual_len)
    body = _pack_records(tensor.blocks)
    if tensor.residual is not None:
        body += _pack_records(tensor.residual)
    return head + body


def decode_bfp(blob: bytes) -> BfpTensor:
    if len(blob) < _BFP_HEAD.size:
        raise FormatError("truncated BFP header")
    magic, version, axis_code, g, m, tokens, channels, residual_len = _BFP_HEAD.unpack_from(blob)
    if magic != BFP_MAGIC:
        raise FormatError(f"bad BFP magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported BFP version {version}")
    axes = {code: axis for axis, code in AXIS_CODES.items()}
    if axis_code not in axes:
        raise FormatError(f"unknown axis code {axis_code}")
    if g < 1 or not 1 <= m <= MAX_MANTISSA_BITS:
        raise FormatError(f"invalid group size {g} or mantissa width {m}")
    axis = axes[axis_code]
    offset = _BFP_HEAD.size

    if axis is GroupAxis.PER_TOKEN:
        if channels % g or residual_len:
            raise FormatError("per-token tensor with partial groups")
        lead = (tokens, channels // g)
    else:
        if residual_len != tokens % g:
            raise FormatError(f"residual length {residual_len} does not match {tokens} tokens")
        lead = (tokens // g, channels)
    blocks, offset = _unpack_records(blob, offset, lead[0] * lead[1], g, m, lead)
    residual = None
    if residual_len:
        residual, offset = _unpack_records(blob, offset, channels, residual_len, m, (channels,))
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after group records")
    return BfpTensor(axis, (tokens, channels), BfpConfig(g, m), blocks, residual)


def write_bfp(path: str, tensor: BfpTensor) -> None:
    with open(path, "wb") as f:
        f.write(encode_bfp(tensor))
    logger.debug(f"✅ Wrote {tensor.group_count} BFP groups to {path}")


def read_bfp(path: str) -> BfpTensor:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}")
    return decode_bfp(blob)
