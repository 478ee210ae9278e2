"""Activation-aware asymmetric INT4 group quantization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

QMAX = 15
# smallest positive half-precision value (subnormal 2**-24)
MIN_F16_SCALE = np.float16(np.finfo(np.float16).smallest_subnormal)
DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(21))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _quantize_rows(w: np.ndarray):
    """Quantize every row of ``w`` (shape ``[..., gs]``) as one group.

    The group range is widened to include 0 so the zero point always lands
    in [0, 15] and the grid covers every weight.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    lo = np.minimum(w.min(axis=-1), 0.0)
    hi = np.maximum(w.max(axis=-1), 0.0)
    with np.errstate(over="ignore"):
        scale = ((hi - lo) / QMAX).astype(np.float16)
    if np.any(np.isinf(scale)):
        raise ValueError("group range exceeds half precision")
    degenerate = scale == 0
    scale = np.where(degenerate, MIN_F16_SCALE, scale).astype(np.float16)
    s = scale.astype(np.float64)
    zero = np.clip(round_half_away(-lo / s), 0, QMAX)
    zero = np.where(degenerate & (hi == lo), 8, zero)
    codes = np.clip(round_half_away(w / s[..., None]) + zero[..., None], 0, QMAX)
    return codes.astype(np.uint8), scale, zero.astype(np.uint8)


@dataclass(frozen=True)
class QuantGroup:
    codes: np.ndarray  # uint8 [gs]
    scale: np.float16
    zero: int

    def __post_init__(self):
        if np.any(np.asarray(self.codes) > QMAX) or not 0 <= int(self.zero) <= QMAX:
            raise ValueError("codes and zero must be 4-bit values")
        if not float(self.scale) > 0:
            raise ValueError("group scale must be positive")


def quantize_group(w: Sequence[float]) -> QuantGroup:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("a group is a non-empty 1-D sequence")
    codes, scale, zero = _quantize_rows(w[None, :])
    return QuantGroup(codes[0], scale[0], int(zero[0]))


def dequantize_group(g: QuantGroup) -> np.ndarray:
    diff = np.asarray(g.codes, dtype=np.float32) - np.float32(g.zero)
    return diff * np.float32(g.scale)


@dataclass
class QuantizedTensor:
    """INT4 weights of one ``[out, in]`` matrix, grouped along ``in``.

    ``codes`` is ``[out, in]``; ``scales`` and ``zeros`` are ``[out, in // gs]``.
    When ``channel_scale`` is set the stored weights are ``W * channel_scale``
    and callers must divide activations by it.
    """

    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    group_size: int
    channel_scale: Optional[np.ndarray] = None

    @property
    def out_channels(self) -> int:
        return self.codes.shape[0]

    @property
    def in_channels(self) -> int:
        return self.codes.shape[1]

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def group(self, o: int, g: int) -> QuantGroup:
        gs = self.group_size
        return QuantGroup(self.codes[o, g * gs : (g + 1) * gs], self.scales[o, g], int(self.zeros[o, g]))

    def dequantize(self) -> np.ndarray:
        """FP32 ``(q - z) * s`` for every weight (channel scaling not undone)."""
        gs = self.group_size
        s = np.repeat(self.scales.astype(np.float32), gs, axis=1)
        z = np.repeat(self.zeros.astype(np.float32), gs, axis=1)
        return (self.codes.astype(np.float32) - z) * s

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        cs_eq = (self.channel_scale is None and other.channel_scale is None) or (
            self.channel_scale is not None
            and other.channel_scale is not None
            and np.array_equal(self.channel_scale.view(np.uint16), other.channel_scale.view(np.uint16))
        )
        return (
            self.group_size == other.group_size
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales.view(np.uint16), other.scales.view(np.uint16))
            and np.array_equal(self.zeros, other.zeros)
            and cs_eq
        )


def quantize_tensor(w: np.ndarray, gs: int, channel_scale: Optional[np.ndarray] = None) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float64)
    if gs <= 0:
        raise ValueError(f"group size must be positive, got {gs}")
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    out, inp = w.shape
    if inp % gs:
        raise ValueError(f"in_channels {inp} not divisible by group size {gs}")
    cs = None
    if channel_scale is not None:
        cs = np.asarray(channel_scale, dtype=np.float16)
        if cs.shape != (inp,) or not np.all(cs.astype(np.float64) > 0):
            raise ValueError("channel_scale must be positive with one entry per input channel")
        w = w * cs.astype(np.float64)[None, :]
    codes, scales, zeros = _quantize_rows(w.reshape(out, inp // gs, gs))
    return QuantizedTensor(codes.reshape(out, inp), scales, zeros, gs, cs)


def activation_magnitude(calib: np.ndarray) -> np.ndarray:
    """Per-channel mean |activation|, zeros replaced by the smallest positive."""
    m = np.mean(np.abs(np.asarray(calib, dtype=np.float64)), axis=0)
    pos = m[m > 0]
    if pos.size == 0:
        return np.ones_like(m)
    return np.where(m > 0, m, pos.min())


def candidate_scales(m: np.ndarray, alpha: float) -> np.ndarray:
    """``(m / geomean(m)) ** alpha`` rounded to the stored half precision."""
    logm = np.log(m)
    s = np.exp(alpha * (logm - logm.mean()))
    return s.astype(np.float16)


def scaled_output_mse(w: np.ndarray, calib: np.ndarray, s: np.ndarray, gs: int) -> float:
    qt = quantize_tensor(w, gs, s)
    w_hat = qt.dequantize().astype(np.float64)
    x = np.asarray(calib, dtype=np.float64)
    ref = x @ np.asarray(w, dtype=np.float64).T
    approx = (x / s.astype(np.float64)) @ w_hat.T
    return float(np.mean((ref - approx) ** 2))


def awq_search_channel_scales(
    w: np.ndarray,
    calib: np.ndarray,
    alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    gs: int = 64,
    return_details: bool = False,
):
    """Grid-search the per-input-channel scaling exponent that minimizes the
    calibration output MSE after quantization.

    Ties go to the smaller exponent.  With ``return_details`` the result is
    ``(scales, best_alpha, {alpha: mse})``.
    """
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2 or calib.shape[0] < 1:
        raise ValueError("need at least one calibration sample")
    if len(alpha_grid) == 0:
        raise ValueError("alpha_grid must be non-empty")
    m = activation_magnitude(calib)
    best = None
    losses = {}
    for alpha in sorted(alpha_grid):
        s = candidate_scales(m, alpha)
        loss = scaled_output_mse(w, calib, s, gs)
        losses[alpha] = loss
        if best is None or loss < best[0]:
            best = (loss, alpha, s)
    if return_details:
        return best[2], best[1], losses
    return best[2]
