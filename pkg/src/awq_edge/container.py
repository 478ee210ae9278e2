"""Weights file + JSON architecture file.

Binary layout (little-endian), version 1::

    header     8s magic "AWQMACRO", u32 version, u32 entry count
    directory  entry count x (u64 name hash, u8 dtype, u8 ndim, u16 group size,
               u32 dim0, u32 dim1, u64 offset, u64 length)
    payload    sections back to back in directory order

dtype 0 is raw FP16, 1 is an AWQ_MACRO stream (4 channel streams
concatenated in channel order), 2 is the FP16 per-input-channel scale
vector of the preceding macro tensor.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .config import ConfigError, ModelConfig
from .macro import ChannelSchedule, PackedTensor, layout_tensor, macro_bytes, unlayout_tensor
from .quant import QuantizedTensor

MAGIC = b"AWQMACRO"
VERSION = 1
HEADER = struct.Struct("<8sII")
ENTRY = struct.Struct("<QBBHIIQQ")
FILE_SCHEDULE = ChannelSchedule(4)

DT_F16, DT_MACRO, DT_CHANNEL_SCALE = 0, 1, 2
SCALE_SUFFIX = ".awq_scale"


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DirectoryError(FormatError):
    pass


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def model_paths(stem) -> Tuple[Path, Path]:
    p = Path(stem)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".bin"), p.with_name(p.name + ".json")


def _entries(config: ModelConfig):
    """(name, dtype, shape, payload bytes) for every section, in file order."""
    quantized = set(config.quantized_tensors)
    out = []
    for name, shape in config.tensor_shapes().items():
        if name in quantized:
            o, i = shape
            gs = config.group_size
            out.append((name, DT_MACRO, shape, (o // 8) * (i // gs) * macro_bytes(gs)))
            if config.awq_channel_scales:
                out.append((name + SCALE_SUFFIX, DT_CHANNEL_SCALE, (i,), 2 * i))
        else:
            out.append((name, DT_F16, shape, 2 * int(np.prod(shape))))
    return out


def packed_size(config: ModelConfig) -> int:
    """Exact byte length of the weights file :func:`write_model` produces."""
    entries = _entries(config)
    return HEADER.size + ENTRY.size * len(entries) + sum(e[3] for e in entries)


def _atomic_write(path: Path, chunks) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_model(stem, config: ModelConfig, tensors: Dict[str, object]) -> Tuple[Path, Path]:
    """Write ``<stem>.bin`` and ``<stem>.json``.

    ``tensors`` maps names to float arrays (stored FP16) or, for names in
    ``config.quantized_tensors``, to :class:`QuantizedTensor`/:class:`PackedTensor`.
    """
    bin_path, json_path = model_paths(stem)
    entries = _entries(config)
    payloads = []
    for name, dtype, shape, length in entries:
        if dtype == DT_CHANNEL_SCALE:
            base = tensors[name[: -len(SCALE_SUFFIX)]]
            if base.channel_scale is None:
                raise ValueError(f"{name[: -len(SCALE_SUFFIX)]} has no channel scale but config says it should")
            data = np.asarray(base.channel_scale, dtype="<f2").tobytes()
        elif name not in tensors:
            raise KeyError(f"missing tensor {name}")
        elif dtype == DT_MACRO:
            t = tensors[name]
            if isinstance(t, QuantizedTensor):
                t = PackedTensor.from_quantized(t)
            if not isinstance(t, PackedTensor):
                raise TypeError(f"{name} must be quantized")
            if (t.out_channels, t.in_channels) != shape or t.group_size != config.group_size:
                raise ValueError(f"{name} has shape {t.out_channels}x{t.in_channels}/gs{t.group_size}, config wants {shape}/gs{config.group_size}")
            if (t.channel_scale is not None) != config.awq_channel_scales:
                raise ValueError(f"{name}: channel scale presence disagrees with config")
            data = b"".join(layout_tensor(t, FILE_SCHEDULE))
        else:
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, config wants {shape}")
            data = np.ascontiguousarray(arr, dtype="<f2").tobytes()
        assert len(data) == length, name
        payloads.append(data)

    chunks = [HEADER.pack(MAGIC, VERSION, len(entries))]
    offset = HEADER.size + ENTRY.size * len(entries)
    for (name, dtype, shape, length) in entries:
        dims = tuple(shape) + (0,) * (2 - len(shape))
        gs = config.group_size if dtype == DT_MACRO else 0
        chunks.append(ENTRY.pack(name_hash(name), dtype, len(shape), gs, dims[0], dims[1], offset, length))
        offset += length
    chunks.extend(payloads)
    _atomic_write(bin_path, chunks)
    _atomic_write(json_path, [(json.dumps(config.to_dict(), indent=2) + "\n").encode()])
    return bin_path, json_path


def read_directory(data: bytes):
    """Validate header and directory; returns ``(version, [entry tuples])``."""
    if len(data) < HEADER.size:
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the header")
    magic, version, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, reader supports {VERSION}")
    dir_end = HEADER.size + ENTRY.size * count
    if dir_end > len(data):
        raise TruncatedFileError(f"directory of {count} entries runs past end of file")
    entries = [ENTRY.unpack_from(data, HEADER.size + ENTRY.size * k) for k in range(count)]
    expected = dir_end
    for h, dtype, ndim, gs, d0, d1, offset, length in entries:
        if offset != expected:
            raise DirectoryError(f"section offset {offset} where {expected} was expected")
        expected += length
    if expected > len(data):
        raise TruncatedFileError(f"sections need {expected} bytes, file has {len(data)}")
    if expected < len(data):
        raise DirectoryError(f"{len(data) - expected} trailing bytes after last section")
    return version, entries


def read_model(stem) -> Tuple[ModelConfig, Dict[str, Union[np.ndarray, PackedTensor]]]:
    """Load a file pair: FP16 sections as float16 arrays, quantized ones as
    :class:`PackedTensor` (channel scales attached)."""
    bin_path, json_path = model_paths(stem)
    try:
        config = ModelConfig.from_dict(json.loads(json_path.read_text()))
    except OSError as e:
        raise FormatError(f"cannot read architecture file {json_path}: {e.strerror}") from None
    except (json.JSONDecodeError, ConfigError) as e:
        raise FormatError(f"bad architecture file {json_path}: {e}") from None
    try:
        data = bin_path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read weights file {bin_path}: {e.strerror}") from None
    _, entries = read_directory(data)

    expected = _entries(config)
    if len(entries) != len(expected):
        raise DirectoryError(f"directory has {len(entries)} entries, config implies {len(expected)}")
    tensors: Dict[str, object] = {}
    for entry, (name, dtype, shape, length) in zip(entries, expected):
        h, e_dtype, ndim, gs, d0, d1, offset, e_len = entry
        if h != name_hash(name) or e_dtype != dtype or (d0, d1)[:ndim] != tuple(shape) or e_len != length:
            raise DirectoryError(f"directory entry for {name} does not match the architecture file")
        raw = data[offset : offset + length]
        if dtype == DT_F16:
            tensors[name] = np.frombuffer(raw, dtype="<f2").astype(np.float16).reshape(shape)
        elif dtype == DT_MACRO:
            if gs != config.group_size:
                raise DirectoryError(f"{name} packed at group size {gs}, config says {config.group_size}")
            o, i = shape
            blocks = [len(FILE_SCHEDULE.row_blocks(c, o // 8)) for c in range(FILE_SCHEDULE.channel_count)]
            per_block = (i // gs) * macro_bytes(gs)
            bounds = np.cumsum([0] + [b * per_block for b in blocks])
            streams = [raw[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
            tensors[name] = unlayout_tensor(streams, o, i, gs, FILE_SCHEDULE)
        else:
            base = name[: -len(SCALE_SUFFIX)]
            tensors[base].channel_scale = np.frombuffer(raw, dtype="<f2").astype(np.float16)
    return config, tensors


def inspect_model(stem) -> Tuple[ModelConfig, list]:
    """Directory listing of a file pair as dicts (validates the whole file)."""
    config, tensors = read_model(stem)
    data_len = model_paths(stem)[0].stat().st_size
    rows = []
    for name, dtype, shape, length in _entries(config):
        row = {"name": name, "dtype": ("f16", "awq_macro", "awq_scale_f16")[dtype],
               "shape": list(shape), "bytes": length}
        if dtype == DT_MACRO:
            gs = config.group_size
            row["group_size"] = gs
            row["macros"] = (shape[0] // 8) * (shape[1] // gs)
            row["bits_per_weight"] = length * 8 / (shape[0] * shape[1])
        rows.append(row)
    assert data_len == packed_size(config)
    return config, rows
