"""Profiler, roofline throughput estimate, compression and score reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ModelConfig
from .container import packed_size
from .flops import ROWS, count_flops
from .macro import macro_bytes

# reported reference values, printed next to our own numbers
REFERENCE_SCORES = {"baseline": 0.40, "awq_gs64": 0.55}
REFERENCE_DECODE_TOKENS_PER_S = 5.10


@dataclass(frozen=True)
class HwParams:
    mem_bandwidth: float = 19.2e9  # bytes/s
    accel_freq: float = 200e6  # Hz
    channels: int = 4
    strip_bits: int = 128
    pe_rows: int = 8
    pe_cols: int = 8
    cycles_per_tile: float = 1.0
    pipeline_fill_cycles: float = 0.0  # paid once per tensor pass
    ps_overhead_per_token: float = 0.0  # seconds

    def __post_init__(self):
        if min(self.mem_bandwidth, self.accel_freq, self.channels, self.cycles_per_tile) <= 0:
            raise ValueError("hardware parameters must be positive")
        if self.strip_bits != 128 or self.pe_rows != 8:
            raise ValueError("format v1 fixes 128-bit strips and 8-row macros")
        if self.pipeline_fill_cycles < 0 or self.ps_overhead_per_token < 0:
            raise ValueError("overheads must be nonnegative")


def streamed_bytes_per_token(config: ModelConfig) -> int:
    """Bytes of quantized weights (plus channel scales) touched per token."""
    total = 0
    gs = config.group_size
    for name in config.quantized_tensors:
        out, inp = config.linear_shape(name)
        total += (out // 8) * (inp // gs) * macro_bytes(gs)
        if config.awq_channel_scales:
            total += 2 * inp
    return total


def accel_cycles(config: ModelConfig, hw: HwParams, n_tokens: int = 1) -> float:
    """Cycles for the busiest channel, summed over tensors, for ``n_tokens``
    activation vectors per weight pass."""
    gs = config.group_size
    if gs % hw.pe_cols:
        raise ValueError("group size must be a multiple of the PE column count")
    cycles = 0.0
    for name in config.quantized_tensors:
        out, inp = config.linear_shape(name)
        blocks = math.ceil((out // 8) / hw.channels)
        tiles = blocks * (inp // gs) * (gs // hw.pe_cols)
        cycles += n_tokens * tiles * hw.cycles_per_tile + hw.pipeline_fill_cycles
    return cycles


def estimate_throughput(config: ModelConfig, hw: HwParams = HwParams(), stage: str = "decode", n_tokens: int = 1) -> float:
    """Roofline tokens/s: the slower of weight streaming and the PE arrays,
    plus per-token host overhead.  ``prefill`` shares one weight pass among
    ``n_tokens`` prompt tokens.  An upper bound, not a measurement."""
    if stage not in ("decode", "prefill"):
        raise ValueError(f"unknown stage {stage!r}")
    n = 1 if stage == "decode" else n_tokens
    if n <= 0:
        raise ValueError("prefill needs at least one token")
    t_mem = streamed_bytes_per_token(config) / hw.mem_bandwidth
    t_compute = accel_cycles(config, hw, n) / hw.accel_freq
    t_total = max(t_mem, t_compute) + n * hw.ps_overhead_per_token
    return n / t_total


def decode_bandwidth_bound(config: ModelConfig, hw: HwParams = HwParams()) -> float:
    return hw.mem_bandwidth / streamed_bytes_per_token(config)


@dataclass
class PerfRow:
    key: str
    description: str
    time_us: float
    percentage: float
    flops: int
    mac: bool


@dataclass
class PerfReport:
    rows: List[PerfRow]
    total_time_us: float
    total_flops: int
    runs: int
    tokens_generated: int
    host_tokens_per_s: float
    est_prefill_tokens_per_s: float
    est_decode_tokens_per_s: float
    streamed_bytes_per_token: int
    notes: List[str] = field(default_factory=list)

    @property
    def mac_time_share(self) -> float:
        return sum(r.percentage for r in self.rows if r.mac)

    @property
    def mac_flop_share(self) -> float:
        return sum(r.flops for r in self.rows if r.mac) / self.total_flops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mac_time_percent"] = self.mac_time_share
        d["mac_flop_share"] = self.mac_flop_share
        return d


class SectionTimer:
    def __init__(self):
        self.ns: Dict[str, int] = defaultdict(int)

    @contextmanager
    def section(self, name):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            self.ns[name] += time.perf_counter_ns() - t0


def build_report(config: ModelConfig, times_us: Dict[str, float], seq_len: int, n_logits: int, runs: int,
                 tokens_generated: int, hw: HwParams = HwParams(), prompt_len: int = 1) -> PerfReport:
    trace = count_flops(config, seq_len, n_logits)
    total = sum(times_us.get(k, 0.0) for k in ROWS)
    rows = []
    for key, (desc, mac) in ROWS.items():
        t = times_us.get(key, 0.0)
        pct = 100.0 * t / total if total > 0 else 100.0 / len(ROWS)
        rows.append(PerfRow(key, desc, t, pct, trace.flops[key], mac))
    host_tps = tokens_generated / (total * 1e-6) if total > 0 and tokens_generated else 0.0
    return PerfReport(
        rows, total, trace.total_flops, runs, tokens_generated, host_tps,
        estimate_throughput(config, hw, "prefill", max(prompt_len, 1)),
        estimate_throughput(config, hw, "decode"),
        streamed_bytes_per_token(config),
        [f"reference decode throughput on the target board: {REFERENCE_DECODE_TOKENS_PER_S} tokens/s"],
    )


def profile_generate(model, prompt: Sequence[int], n_new: int, runs: int = 5, hw: HwParams = HwParams()) -> PerfReport:
    """Time :meth:`Model.generate` per breakdown row; each row keeps its
    fastest of ``runs`` repetitions."""
    from .model import Greedy

    if runs < 1:
        raise ValueError("runs must be at least 1")
    best: Dict[str, float] = {}
    for _ in range(runs):
        timer = SectionTimer()
        model.generate(prompt, n_new, Greedy(), timer)
        for k, ns in timer.ns.items():
            us = ns / 1e3
            best[k] = min(best.get(k, us), us)
    seq_len = len(prompt) + max(n_new - 1, 0)
    return build_report(model.config, best, seq_len, max(n_new, 1), runs, n_new, hw, len(prompt))


def format_table(report: PerfReport) -> str:
    width = max(len(r.description) for r in report.rows)
    lines = [f"{'Description':<{width}}  {'Time (us)':>12}  {'Percent':>8}  {'Ops':>16}"]
    lines.append("-" * len(lines[0]))
    for r in report.rows:
        lines.append(f"{r.description:<{width}}  {r.time_us:12.1f}  {r.percentage:8.2f}  {r.flops:16d}")
    lines.append("-" * len(lines[0]))
    mac_t = sum(r.time_us for r in report.rows if r.mac)
    mac_f = sum(r.flops for r in report.rows if r.mac)
    lines.append(f"{'Overall MAC operations':<{width}}  {mac_t:12.1f}  {report.mac_time_share:8.2f}  {mac_f:16d}")
    lines.append(f"{'Total':<{width}}  {report.total_time_us:12.1f}  {100.0:8.2f}  {report.total_flops:16d}")
    lines.append("")
    lines.append(f"runs: {report.runs} (min per row)   generated tokens: {report.tokens_generated}   host tokens/s: {report.host_tokens_per_s:.2f}")
    lines.append(f"roofline estimate: prefill {report.est_prefill_tokens_per_s:.2f} tokens/s, decode {report.est_decode_tokens_per_s:.2f} tokens/s")
    lines.append(f"streamed weight bytes per token: {report.streamed_bytes_per_token}")
    lines.extend(report.notes)
    return "\n".join(lines)


def format_csv(report: PerfReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "description", "time_us", "percentage", "ops", "mac"])
    for r in report.rows:
        w.writerow([r.key, r.description, f"{r.time_us:.3f}", f"{r.percentage:.4f}", r.flops, int(r.mac)])
    return buf.getvalue()


def format_json(report: PerfReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


# --- benchmark score ---------------------------------------------------------

@dataclass(frozen=True)
class ScoreInputs:
    """Each field is ``(candidate, max over compared systems)``."""

    accuracy: Tuple[float, float]
    memory: Tuple[float, float]
    throughput_prefill: Tuple[float, float]
    throughput_decode: Tuple[float, float]


SCORE_WEIGHTS = {"accuracy": 0.4, "memory": 0.2, "throughput_prefill": 0.2, "throughput_decode": 0.2}


def score(inputs: ScoreInputs) -> float:
    """Weighted sum of each ratio divided by its maximum."""
    total = 0.0
    for name, weight in SCORE_WEIGHTS.items():
        value, best = getattr(inputs, name)
        if not best > 0:
            raise ValueError(f"{name}: maximum must be positive, got {best}")
        if value < 0:
            raise ValueError(f"{name}: ratio must be nonnegative, got {value}")
        total += weight * (value / best)
    return total


# --- compression ---------------------------------------------------------------

@dataclass
class CompressionReport:
    original_bytes: int
    packed_bytes: int
    reduction_percent: float
    bits_per_weight: Optional[float]


def bits_per_weight(group_size: int) -> float:
    return macro_bytes(group_size) * 8 / (8 * group_size)


def compression_report(config: ModelConfig) -> CompressionReport:
    """FP16 size of every parameter against the packed file size."""
    original = 2 * config.param_count()
    packed = packed_size(config)
    bpw = bits_per_weight(config.group_size) if config.quantized_tensors else None
    return CompressionReport(original, packed, 100.0 * (1.0 - packed / original), bpw)
