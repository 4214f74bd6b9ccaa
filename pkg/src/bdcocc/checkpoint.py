"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BDC1"  u16 version  u32 n_records
    per record:
        u16 name_len  name (UTF-8)
        u8 dtype      0=f32 1=f64 2=i32 3=bits
        u8 rank       u32 dims[rank]
        payload       raw little-endian values; bits are u64 words packed
                      along the channel axis of ``dims``
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import dataclasses
import struct
import zlib
from pathlib import Path

import numpy as np

from .binarize import BinaryConvParams
from .errors import CheckpointError
from .tensor import BitTensor, Shape, channel_axis, n_words

MAGIC = b"BDC1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
BITS = 3
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


def encode(records: dict[str, np.ndarray | BitTensor]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<HI", VERSION, len(records))
    for name, val in records.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        if isinstance(val, BitTensor):
            if val.axis != channel_axis(len(val.shape)):
                raise CheckpointError(f"{name}: only channel-packed bit tensors are stored")
            code, dims, payload = BITS, tuple(val.shape), val.words.astype("<u8").tobytes()
        else:
            arr = np.asarray(val)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            code, dims = _CODES[arr.dtype], arr.shape
            payload = arr.astype(DTYPES[_CODES[arr.dtype]]).tobytes()
        out += struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        out += payload
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode(blob: bytes) -> dict[str, np.ndarray | BitTensor]:
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not a BDC1 checkpoint")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    records: dict[str, np.ndarray | BitTensor] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            if code == BITS:
                shape = Shape(dims)
                ax = channel_axis(len(shape))
                wshape = tuple(d for i, d in enumerate(dims) if i != ax) + (n_words(dims[ax]),)
                nbytes = 8 * int(np.prod(wshape))
                words = np.frombuffer(blob, "<u8", nbytes // 8, pos).reshape(wshape).copy()
                records[name] = BitTensor(shape, words, ax)
            else:
                dt = DTYPES[code]
                count_el = int(np.prod(dims)) if rank else 1
                nbytes = dt.itemsize * count_el
                records[name] = np.frombuffer(blob, dt, count_el, pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(blob) - 4:
        raise CheckpointError("trailing bytes after the last record")
    return records


def save(path, records) -> None:
    Path(path).write_bytes(encode(records))


def load(path) -> dict[str, np.ndarray | BitTensor]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# parameter trees <-> records


def state_records(tree, prefix: str = "") -> dict[str, np.ndarray | BitTensor]:
    """Every array in a parameter tree (weights and running statistics), plus
    the packed signs of each binarized conv under ``<name>.signs``."""
    out: dict = {}

    def visit(obj, name):
        join = (lambda s: f"{name}.{s}") if name else str
        if isinstance(obj, BinaryConvParams):
            out[join("latent_weights")] = obj.latent_weights
            out[join("signs")] = obj.packed_signs
        elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for f in dataclasses.fields(obj):
                val = getattr(obj, f.name)
                if isinstance(val, np.ndarray):
                    out[join(f.name)] = val
                else:
                    visit(val, join(f.name))
        elif isinstance(obj, (list, tuple)):
            for i, val in enumerate(obj):
                visit(val, join(str(i)))

    visit(tree, prefix.rstrip("."))
    return out


def load_into(tree, records) -> None:
    """Copy records into the matching arrays of ``tree`` and refresh every
    binarized conv; the stored sign bits must agree with the weights."""
    target = state_records(tree)
    missing = set(target) - set(records)
    extra = set(records) - set(target)
    if missing or extra:
        raise CheckpointError(f"record mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    for name, arr in target.items():
        if isinstance(arr, BitTensor):
            continue
        src = records[name]
        if not isinstance(src, np.ndarray) or src.shape != arr.shape:
            raise CheckpointError(f"{name}: shape mismatch")
        arr[...] = src
    from .autograd import binary_convs

    for conv in binary_convs(tree):
        conv.refresh()
    for name, arr in state_records(tree).items():
        if isinstance(arr, BitTensor) and arr != records[name]:
            raise CheckpointError(f"{name}: stored signs disagree with the weights")
