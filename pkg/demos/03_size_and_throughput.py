"""
Model size, operation counts and a roofline estimate
=====================================================

Analytic numbers for the 0.5B-parameter configuration; nothing here needs
the weights.
"""

# %%
from awq_edge import shipped_config
from awq_edge.flops import ROWS, count_flops
from awq_edge.perf import HwParams, compression_report, decode_bandwidth_bound, estimate_throughput

cfg = shipped_config("qwen2.5-0.5b")
r = compression_report(cfg)
print(f"fp16 {r.original_bytes / 1e6:.1f} MB -> packed {r.packed_bytes / 1e6:.1f} MB "
      f"({r.reduction_percent:.2f}% smaller, {r.bits_per_weight} bits per quantized weight)")

# %%
# Operations for a 128-token prompt, grouped like a latency breakdown.
trace = count_flops(cfg, 128)
for key, (desc, mac) in ROWS.items():
    print(f"{desc:<48} {100 * trace.flops[key] / trace.total_flops:6.2f}%{'  MAC' if mac else ''}")
print(f"MAC share {100 * trace.mac_share:.2f}%")

# %%
# Decode streams every packed weight once per token; prefill shares that pass.
hw = HwParams()
print(f"decode bound {decode_bandwidth_bound(cfg, hw):.1f} tokens/s")
for n in (1, 16, 128):
    print(f"prefill of {n:>3} tokens: {estimate_throughput(cfg, hw, 'prefill', n):8.1f} tokens/s")
print(f"half the bandwidth: {estimate_throughput(cfg, HwParams(mem_bandwidth=9.6e9)):.1f} tokens/s")
