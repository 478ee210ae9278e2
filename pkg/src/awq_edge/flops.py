"""Closed-form operation counts per latency-breakdown row.

A multiply-accumulate counts as two operations.  Elementwise costs:
RMSNorm ``4n + 3`` per vector, RoPE 3 per lane, SiLU-gated product 6 per
hidden unit, attention ``4 * head_dim + 4`` per head and context position
(scores, scaling, softmax, weighted sum).  Concatenating heads moves data
and counts zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

from .config import ModelConfig

# key -> (description, counts as MAC work)
ROWS = {
    "embed": ("Token Embedding copy + Layer init.", False),
    "qkv_proj": ("Q/K/V Projection MAC operations", True),
    "qkv_bias": ("Q/K/V Bias addition", False),
    "out_proj": ("Output projection + Residual Add", True),
    "mha": ("MHA computation (Concatenation)", False),
    "ffn_gate_up": ("FFN Gate Projection + Up Projection", True),
    "ffn_down": ("FFN Down Projection + Residual Add", True),
    "rope": ("Rotary Positional Encoding (RoPE) for Q/K", False),
    "rmsnorm": ("Root Mean Square Normalization (RMSNorm)", False),
    "silu": ("SiLU Activation + Element-wise Multiplication", False),
    "classifier": ("Output head (classifier) MAC operations", True),
}
MAC_ROWS = tuple(k for k, (_, mac) in ROWS.items() if mac)


@dataclass
class ForwardTrace:
    flops: Dict[str, int]
    times: Dict[str, float] = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    @property
    def mac_flops(self) -> int:
        return sum(self.flops[k] for k in MAC_ROWS)

    @property
    def mac_share(self) -> float:
        return self.mac_flops / self.total_flops


def count_flops(config: ModelConfig, seq_len: int, n_logits: int = 1) -> ForwardTrace:
    """Operations to push ``seq_len`` tokens through the model from an empty
    cache, computing logits for ``n_logits`` of them."""
    c = config
    L, S = c.n_layers, seq_len
    qkv = c.q_dim + 2 * c.kv_dim
    ctx_sum = S * (S + 1) // 2
    flops = {
        "embed": S * c.dim,
        "qkv_proj": L * S * 2 * c.dim * qkv,
        "qkv_bias": L * S * qkv,
        "out_proj": L * S * (2 * c.q_dim * c.dim + c.dim),
        "mha": L * c.n_heads * (4 * c.head_dim + 4) * ctx_sum,
        "ffn_gate_up": L * S * 4 * c.dim * c.ffn_hidden,
        "ffn_down": L * S * (2 * c.ffn_hidden * c.dim + c.dim),
        "rope": L * S * 3 * (c.n_heads + c.n_kv_heads) * c.head_dim,
        "rmsnorm": (2 * L * S + n_logits) * (4 * c.dim + 3),
        "silu": L * S * 6 * c.ffn_hidden,
        "classifier": n_logits * 2 * c.dim * c.vocab_size,
    }
    return ForwardTrace(flops, {k: 0.0 for k in flops})
