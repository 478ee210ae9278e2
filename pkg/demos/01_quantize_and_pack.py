"""
Quantizing one layer and packing it into macros
================================================

Group-wise INT4 quantization of a random projection, an activation-aware
channel scale search, and the byte layout of a single 288-byte macro.
"""

# %%
import numpy as np

from awq_edge.macro import PackedTensor, layout_tensor, macro_bytes, unpack_macro
from awq_edge.quant import awq_search_channel_scales, quantize_tensor

rng = np.random.default_rng(0)
w = rng.standard_normal((64, 256)) / 16

# %%
# Plain round-to-nearest with one f16 scale and one 4-bit zero point per 64 inputs.
qt = quantize_tensor(w, 64)
err = np.abs(qt.dequantize() - w)
print("codes", qt.codes.shape, "scales", qt.scales.shape, "max abs error", err.max())

# %%
# Calibration activations where input channel 3 is two orders of magnitude louder.
# The search scales that column up before rounding, and divides the activations by the same factor.
x = rng.standard_normal((64, 256))
x[:, 3] *= 100
s, alpha, losses = awq_search_channel_scales(w, x, gs=64, return_details=True)
print(f"chosen alpha {alpha}, output mse {losses[alpha]:.3e} vs {losses[0.0]:.3e} unscaled")
print("scale on the loud channel", float(s[3]))

# %%
# Eight output rows times one input group make a macro: a strip of scales,
# a strip of zeros, then one 32-bit word per input position.
pt = PackedTensor.from_quantized(quantize_tensor(w, 64, s))
m = pt.macro(0, 0)
print(len(m.data), "bytes, expected", macro_bytes(64))
print("scale strip", m.data[:16].hex(" "))
print("zero strip ", m.data[16:32].hex(" "))
print("first words", m.data[32:48].hex(" "))
codes, scales, zeros = unpack_macro(m)
assert np.array_equal(codes, pt.to_quantized().codes[:8, :64])

# %%
# The file spreads row blocks round-robin over four channel streams.
streams = layout_tensor(pt)
print("bytes per channel stream", [len(b) for b in streams])
print("bits per weight", 8 * sum(len(b) for b in streams) / w.size)
