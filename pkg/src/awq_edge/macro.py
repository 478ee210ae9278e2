"""AWQ_MACRO block packing and the multi-channel streaming layout.

One macro covers 8 output channels x ``gs`` input positions and is a run of
128-bit strips, little-endian throughout:

    strip 0        8 half-precision scales, output channel 0..7
    strip 1        8 zero points as nibbles of the low 32-bit word; the
                   upper 96 bits must be zero
    strips 2..     ``gs / 4`` strips holding ``gs`` 32-bit words, one per
                   input position (ascending);
                   nibble j (bits 4j..4j+3) is output channel j's code

See FORMAT.md for a worked example.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .quant import QuantizedTensor

ROWS = 8  # output channels per macro
STRIP_BYTES = 16
NIBBLE_SHIFTS = np.arange(ROWS, dtype=np.uint32) * 4


class CorruptMacroError(ValueError):
    """Macro bytes violate the layout (size or padding)."""


class LayoutError(ValueError):
    pass


def macro_bytes(gs: int) -> int:
    # gs * 8 nibbles fill gs / 4 strips, plus the scale and zero strips
    return (gs // 4 + 2) * STRIP_BYTES


def _check_gs(gs: int) -> None:
    if gs <= 0 or gs % 8:
        raise LayoutError(f"group size must be a positive multiple of 8, got {gs}")


@dataclass(frozen=True)
class AwqMacro:
    data: bytes
    group_size: int

    def __post_init__(self):
        if len(self.data) != macro_bytes(self.group_size):
            raise CorruptMacroError(
                f"macro is {len(self.data)} bytes, expected {macro_bytes(self.group_size)}"
            )


def nibbles_to_words(codes: np.ndarray) -> np.ndarray:
    """Pack the trailing axis of 8 nibbles into uint32 words."""
    c = np.asarray(codes, dtype=np.uint32)
    return np.bitwise_or.reduce(c << NIBBLE_SHIFTS, axis=-1).astype(np.uint32)


def words_to_nibbles(words: np.ndarray) -> np.ndarray:
    """Shift-and-mask each word into its 8 nibbles (new trailing axis)."""
    w = np.asarray(words, dtype=np.uint32)
    return ((w[..., None] >> NIBBLE_SHIFTS) & np.uint32(0xF)).astype(np.uint8)


def _encode(qwords: np.ndarray, scales: np.ndarray, zwords: np.ndarray) -> np.ndarray:
    """Serialize batches of macros: ``[n, gs]``, ``[n, 8]``, ``[n]`` -> ``[n, bytes]``."""
    n, gs = qwords.shape
    out = np.zeros((n, macro_bytes(gs)), dtype=np.uint8)
    out[:, 0:16] = np.ascontiguousarray(scales, dtype="<f2").view(np.uint8).reshape(n, 16)
    out[:, 16:20] = np.ascontiguousarray(zwords, dtype="<u4").view(np.uint8).reshape(n, 4)
    out[:, 32:] = np.ascontiguousarray(qwords, dtype="<u4").view(np.uint8).reshape(n, gs * 4)
    return out


def _decode(raw: np.ndarray, gs: int):
    n = raw.shape[0]
    if raw.shape[1] != macro_bytes(gs):
        raise CorruptMacroError(f"macro is {raw.shape[1]} bytes, expected {macro_bytes(gs)}")
    if np.any(raw[:, 20:32]):
        raise CorruptMacroError("nonzero padding in the zero-point strip")
    raw = np.ascontiguousarray(raw)
    scales = raw[:, 0:16].copy().view("<f2").reshape(n, 8).astype(np.float16)
    zwords = raw[:, 16:20].copy().view("<u4").reshape(n).astype(np.uint32)
    qwords = raw[:, 32:].copy().view("<u4").reshape(n, gs).astype(np.uint32)
    return qwords, scales, zwords


def pack_macro(codes: np.ndarray, scales: np.ndarray, zeros: np.ndarray) -> AwqMacro:
    """Pack ``codes[8, gs]`` (output channel, input position), 8 scales and 8 zeros."""
    codes = np.asarray(codes)
    zeros = np.asarray(zeros)
    if codes.ndim != 2 or codes.shape[0] != ROWS:
        raise LayoutError(f"codes must be [8, gs], got {codes.shape}")
    gs = codes.shape[1]
    _check_gs(gs)
    if zeros.shape != (ROWS,) or np.shape(scales) != (ROWS,):
        raise LayoutError("need exactly 8 scales and 8 zeros")
    for name, v in (("code", codes), ("zero", zeros)):
        if np.any(v < 0) or np.any(v > 15):
            raise ValueError(f"{name} outside the 4-bit range")
    qwords = nibbles_to_words(codes.T)
    zword = nibbles_to_words(zeros)
    raw = _encode(qwords[None], np.asarray(scales, dtype=np.float16)[None], np.array([zword]))
    return AwqMacro(raw[0].tobytes(), gs)


def unpack_macro(m: AwqMacro, widen: bool = False):
    """Inverse of :func:`pack_macro`: ``(codes[8, gs], scales[8], zeros[8])``.

    Scales come back as float16 unless ``widen`` is set.
    """
    raw = np.frombuffer(m.data, dtype=np.uint8)[None]
    qwords, scales, zwords = _decode(raw, m.group_size)
    codes = words_to_nibbles(qwords[0]).T.copy()
    zeros = words_to_nibbles(zwords[0])
    s = scales[0].astype(np.float32) if widen else scales[0]
    return codes, s, zeros


@dataclass(frozen=True)
class ChannelSchedule:
    """Row blocks go round-robin over channels; each channel streams its
    blocks in ascending order, input groups ascending within a block."""

    channel_count: int = 4

    def __post_init__(self):
        if self.channel_count <= 0:
            raise ValueError("channel_count must be positive")

    def channel_of(self, row_block: int) -> int:
        return row_block % self.channel_count

    def row_blocks(self, channel: int, n_row_blocks: int) -> range:
        return range(channel, n_row_blocks, self.channel_count)

    def assignment(self, n_row_blocks: int, n_groups: int) -> dict:
        """``(row_block, group) -> (channel, sequence position)`` for every macro."""
        return {
            (r, g): (self.channel_of(r), (r // self.channel_count) * n_groups + g)
            for r in range(n_row_blocks)
            for g in range(n_groups)
        }


@dataclass
class PackedTensor:
    """A quantized matrix held in macro form.

    ``qwords[rb, g, pos]`` is the packed word for input position ``pos`` of
    group ``g`` in row block ``rb``; ``scales[rb, g, j]`` and the nibbles of
    ``zwords[rb, g]`` belong to output channel ``8 * rb + j``.
    """

    qwords: np.ndarray
    scales: np.ndarray
    zwords: np.ndarray
    out_channels: int
    in_channels: int
    group_size: int
    channel_scale: Optional[np.ndarray] = None

    @property
    def n_row_blocks(self) -> int:
        return self.out_channels // ROWS

    @property
    def n_groups(self) -> int:
        return self.in_channels // self.group_size

    @property
    def n_macros(self) -> int:
        return self.n_row_blocks * self.n_groups

    @property
    def nbytes(self) -> int:
        return self.n_macros * macro_bytes(self.group_size)

    @classmethod
    def from_quantized(cls, t: QuantizedTensor) -> "PackedTensor":
        out, inp, gs = t.out_channels, t.in_channels, t.group_size
        _check_gs(gs)
        if out % ROWS:
            raise LayoutError(f"out_channels {out} not divisible by 8")
        rb, ng = out // ROWS, inp // gs
        codes = t.codes.reshape(rb, ROWS, ng, gs).transpose(0, 2, 3, 1)
        qwords = nibbles_to_words(codes)
        scales = t.scales.reshape(rb, ROWS, ng).transpose(0, 2, 1).astype(np.float16)
        zwords = nibbles_to_words(t.zeros.reshape(rb, ROWS, ng).transpose(0, 2, 1))
        return cls(qwords, scales, zwords, out, inp, gs, t.channel_scale)

    def to_quantized(self) -> QuantizedTensor:
        ng, gs = self.n_groups, self.group_size
        codes = words_to_nibbles(self.qwords).transpose(0, 3, 1, 2).reshape(self.out_channels, self.in_channels)
        scales = self.scales.transpose(0, 2, 1).reshape(self.out_channels, ng)
        zeros = words_to_nibbles(self.zwords).transpose(0, 2, 1).reshape(self.out_channels, ng)
        return QuantizedTensor(codes.copy(), scales.copy(), zeros.copy(), gs, self.channel_scale)

    def macro(self, row_block: int, group: int) -> AwqMacro:
        raw = _encode(
            self.qwords[row_block, group][None],
            self.scales[row_block, group][None],
            self.zwords[row_block, group][None],
        )
        return AwqMacro(raw[0].tobytes(), self.group_size)


def layout_tensor(t, schedule: ChannelSchedule = ChannelSchedule()) -> List[bytes]:
    """Per-channel macro streams for a quantized or packed tensor."""
    p = t if isinstance(t, PackedTensor) else PackedTensor.from_quantized(t)
    streams = []
    for c in range(schedule.channel_count):
        blocks = list(schedule.row_blocks(c, p.n_row_blocks))
        if not blocks:
            streams.append(b"")
            continue
        raw = _encode(
            p.qwords[blocks].reshape(-1, p.group_size),
            p.scales[blocks].reshape(-1, ROWS),
            p.zwords[blocks].reshape(-1),
        )
        streams.append(raw.tobytes())
    return streams


def unlayout_tensor(
    streams: List[bytes],
    out_channels: int,
    in_channels: int,
    group_size: int,
    schedule: ChannelSchedule = ChannelSchedule(),
    channel_scale: Optional[np.ndarray] = None,
) -> PackedTensor:
    """Reassemble per-channel streams into a :class:`PackedTensor`."""
    _check_gs(group_size)
    if out_channels % ROWS or in_channels % group_size:
        raise LayoutError(f"bad tensor dims {out_channels}x{in_channels} for gs {group_size}")
    if len(streams) != schedule.channel_count:
        raise LayoutError(f"expected {schedule.channel_count} streams, got {len(streams)}")
    rb, ng, mb = out_channels // ROWS, in_channels // group_size, macro_bytes(group_size)
    qwords = np.zeros((rb, ng, group_size), dtype=np.uint32)
    scales = np.zeros((rb, ng, ROWS), dtype=np.float16)
    zwords = np.zeros((rb, ng), dtype=np.uint32)
    for c, data in enumerate(streams):
        blocks = list(schedule.row_blocks(c, rb))
        if len(data) != len(blocks) * ng * mb:
            raise LayoutError(f"channel {c} stream has {len(data)} bytes, expected {len(blocks) * ng * mb}")
        if not blocks:
            continue
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, mb)
        q, s, z = _decode(raw, group_size)
        qwords[blocks] = q.reshape(len(blocks), ng, group_size)
        scales[blocks] = s.reshape(len(blocks), ng, ROWS)
        zwords[blocks] = z.reshape(len(blocks), ng)
    return PackedTensor(qwords, scales, zwords, out_channels, in_channels, group_size, channel_scale)
