"""Software model of the unpack -> dequantize -> PE array -> adder tree datapath.

Numerics are fixed so results are bit-reproducible:

* a PE computes ``f32(q - z) * (x * s)``, activation times scale first;
* the 8 products of one output channel over an 8-position tile are reduced
  by ``((p0+p1)+(p2+p3)) + ((p4+p5)+(p6+p7))``;
* tile sums are added into the channel accumulator in ascending input
  position, one input group after another.

Each logical channel owns the row blocks the :class:`ChannelSchedule` gives
it, so running channels on any number of threads cannot change the output.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .macro import ROWS, AwqMacro, ChannelSchedule, PackedTensor, unpack_macro, words_to_nibbles

F32 = np.float32
TILE = 8


class ScheduleMismatchError(ValueError):
    pass


def pe_element(q, z, scale, activation):
    """One processing element: ``(q - z) * (activation * scale)`` in FP32."""
    diff = (np.asarray(q, dtype=np.int16) - np.asarray(z, dtype=np.int16)).astype(F32)
    return diff * (np.asarray(activation, dtype=F32) * np.asarray(scale, dtype=F32))


def adder_tree_8(p: np.ndarray) -> np.ndarray:
    """Fixed-shape reduction of the trailing axis of length 8."""
    p = np.asarray(p, dtype=F32)
    if p.shape[-1] != 8:
        raise ValueError(f"adder tree takes 8 inputs, got {p.shape[-1]}")
    a = p[..., 0] + p[..., 1]
    b = p[..., 2] + p[..., 3]
    c = p[..., 4] + p[..., 5]
    d = p[..., 6] + p[..., 7]
    return (a + b) + (c + d)


@dataclass
class MacState:
    partial_sums: np.ndarray = field(default_factory=lambda: np.zeros(ROWS, dtype=F32))
    cursor: int = 0


def _tile_sums(diff: np.ndarray, scales: np.ndarray, x: np.ndarray) -> np.ndarray:
    """PE array + adder tree for a group of positions.

    diff: ``[..., gs, 8]`` integer (q - z) per position and output row;
    scales: ``[..., 8]`` FP32; x: ``[m, gs]``.  Returns ``[m, ..., gs/8, 8]``.
    """
    lead = diff.shape[:-2]
    gs = diff.shape[-2]
    xb = x.reshape((x.shape[0],) + (1,) * len(lead) + (gs, 1))
    xs = xb * scales[..., None, :]  # activation * scale
    prod = diff.astype(F32) * xs
    prod = prod.reshape(prod.shape[:-2] + (gs // TILE, TILE, ROWS))
    return adder_tree_8(np.swapaxes(prod, -1, -2))


def macro_mac(m: AwqMacro, x: np.ndarray, state: MacState) -> MacState:
    """Run one macro through the 8x8 PE array, accumulating into ``state``."""
    x = np.asarray(x, dtype=F32)
    if x.shape != (m.group_size,):
        raise ValueError(f"macro expects {m.group_size} activations, got {x.shape}")
    codes, scales, zeros = unpack_macro(m, widen=True)
    diff = codes.T.astype(np.int16) - zeros.astype(np.int16)[None, :]  # [gs, 8]
    tiles = _tile_sums(diff, scales, x[None])[0]  # [gs/8, 8]
    acc = state.partial_sums.astype(F32, copy=True)
    for t in range(tiles.shape[0]):
        acc = acc + tiles[t]
    return MacState(acc, state.cursor + 1)


def _run_channel(t: PackedTensor, blocks: list, x: np.ndarray, out: np.ndarray) -> None:
    gs = t.group_size
    acc = np.zeros((x.shape[0], len(blocks), ROWS), dtype=F32)
    for g in range(t.n_groups):
        # unpacking unit: shift + mask the packed words back into nibbles
        codes = words_to_nibbles(t.qwords[blocks, g]).astype(np.int16)  # [nb, gs, 8]
        zeros = words_to_nibbles(t.zwords[blocks, g]).astype(np.int16)  # [nb, 8]
        scales = t.scales[blocks, g].astype(F32)  # [nb, 8]
        tiles = _tile_sums(codes - zeros[:, None, :], scales, x[:, g * gs : (g + 1) * gs])
        for k in range(tiles.shape[-2]):
            acc = acc + tiles[..., k, :]
    for i, r in enumerate(blocks):
        out[:, r * ROWS : (r + 1) * ROWS] = acc[:, i]


def qmatmul(
    t: PackedTensor,
    x: np.ndarray,
    schedule: ChannelSchedule = ChannelSchedule(),
    workers: int = 1,
) -> np.ndarray:
    """``x @ dequant(t).T`` for ``x`` of shape ``[m, in]``; rows are independent."""
    x = np.asarray(x, dtype=F32)
    if x.ndim != 2 or x.shape[1] != t.in_channels:
        raise ScheduleMismatchError(f"activations {x.shape} do not match tensor in_channels {t.in_channels}")
    if t.qwords.shape[:2] != (t.n_row_blocks, t.n_groups):
        raise ScheduleMismatchError("packed arrays disagree with tensor dims")
    out = np.zeros((x.shape[0], t.out_channels), dtype=F32)
    jobs = [list(schedule.row_blocks(c, t.n_row_blocks)) for c in range(schedule.channel_count)]
    jobs = [b for b in jobs if b]
    workers = max(1, min(int(workers), len(jobs)))
    if workers == 1:
        for blocks in jobs:
            _run_channel(t, blocks, x, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for f in [pool.submit(_run_channel, t, b, x, out) for b in jobs]:
                f.result()
    return out


def qmatvec(
    t: PackedTensor,
    x: np.ndarray,
    schedule: ChannelSchedule = ChannelSchedule(),
    workers: int = 1,
) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1:
        raise ScheduleMismatchError(f"qmatvec takes a vector, got shape {x.shape}")
    return qmatmul(t, x[None], schedule, workers)[0]
