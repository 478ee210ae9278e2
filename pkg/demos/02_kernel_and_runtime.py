"""
The emulated kernel and a tiny decoder
=======================================

The packed matrix-vector product against a dense reference, then a
synthetic four-layer model written to disk, reloaded and run.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from awq_edge import Model, PackedTensor, qmatvec, quantize_tensor, shipped_config, write_model
from awq_edge.model import ByteTokenizer
from awq_edge.synth import quantize_model, synth_fp16

rng = np.random.default_rng(1)
qt = quantize_tensor(rng.standard_normal((896, 896)), 64)
pt = PackedTensor.from_quantized(qt)
x = rng.standard_normal(896).astype(np.float32)

# %%
# Each PE forms (q - z) * (x * s); eight products meet in a fixed adder tree
# and tiles accumulate in order, so the answer does not depend on threading.
y1 = qmatvec(pt, x, workers=1)
y4 = qmatvec(pt, x, workers=4)
ref = qt.dequantize().astype(np.float64) @ x
print("bit-identical across workers:", np.array_equal(y1, y4))
print("max error relative to |W||x|:", np.max(np.abs(y1 - ref) / (np.abs(qt.dequantize()) @ np.abs(x))))

# %%
cfg = shipped_config("tiny")
qcfg, tensors = quantize_model(cfg, synth_fp16(cfg, seed=0))
stem = Path(tempfile.mkdtemp()) / "tiny"
write_model(stem, qcfg, tensors)
model = Model.load(stem)

# %%
# Prefill the prompt in one batch, then decode one token at a time.
tok = ByteTokenizer()
prompt = tok.encode("Hello")
logits, cache = model.prefill(prompt)
print("cache length after prefill", cache.length, "logits", logits.shape)
# Random weights give no meaningful text; the ids are what to look at.
out = model.generate(prompt, 8)
print("generated ids", out)
