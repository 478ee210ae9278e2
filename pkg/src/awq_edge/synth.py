"""Seeded synthetic FP16 models and whole-model quantization."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .config import ModelConfig
from .quant import DEFAULT_ALPHA_GRID, awq_search_channel_scales, quantize_tensor


def synth_fp16(config: ModelConfig, seed: int = 0) -> Dict[str, np.ndarray]:
    """Random FP16 weights for every tensor of ``config``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in config.tensor_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        elif leaf.endswith("bias"):
            w = 0.02 * rng.standard_normal(shape)
        elif name in ("embed_tokens", "lm_head"):
            w = rng.standard_normal(shape)
        else:
            w = rng.standard_normal(shape) / np.sqrt(shape[1])
        out[name] = w.astype(np.float16)
    return out


def synth_calibration(n_samples: int, n_channels: int, rng: np.random.Generator) -> np.ndarray:
    """Activations with log-normal channel magnitudes and a few outlier channels."""
    mag = np.exp(0.5 * rng.standard_normal(n_channels))
    outliers = rng.choice(n_channels, size=max(1, n_channels // 100), replace=False)
    mag[outliers] *= 20.0
    return rng.standard_normal((n_samples, n_channels)) * mag


def quantize_model(
    config: ModelConfig,
    tensors: Dict[str, np.ndarray],
    group_size: Optional[int] = None,
    awq: bool = False,
    calib_samples: int = 32,
    seed: int = 0,
    alpha_grid=DEFAULT_ALPHA_GRID,
):
    """Quantize every projection; returns ``(config, tensors)`` ready for
    :func:`awq_edge.container.write_model`."""
    gs = group_size or config.group_size
    qcfg = config.replace(group_size=gs, quantized_tensors=config.projection_names(), awq_channel_scales=awq)
    rng = np.random.default_rng(seed)
    out = {k: v for k, v in tensors.items() if k not in qcfg.quantized_tensors}
    for name in qcfg.quantized_tensors:
        w = np.asarray(tensors[name], dtype=np.float64)
        scale = None
        if awq:
            calib = synth_calibration(calib_samples, w.shape[1], rng)
            scale = awq_search_channel_scales(w, calib, alpha_grid, gs)
        out[name] = quantize_tensor(w, gs, scale)
    return qcfg, out
