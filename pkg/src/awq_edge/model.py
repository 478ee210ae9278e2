"""Qwen2.5-style decoder: packed-weight projections, KV cache, prefill/decode."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import ModelConfig
from .container import read_model
from .kernel import qmatmul
from .macro import ChannelSchedule, PackedTensor
from .quant import QuantizedTensor
from .tensor import RopeParams, causal_attention, matmul_f32, rmsnorm, rope_apply, silu

F32 = np.float32
Weight = Union[PackedTensor, np.ndarray]


class CacheOverflowError(RuntimeError):
    pass


class TokenError(ValueError):
    pass


class NullTimer:
    """Timer hook that does nothing; the profiler swaps in a real one."""

    def section(self, name):
        return contextlib.nullcontext()


NULL_TIMER = NullTimer()


class KvCache:
    def __init__(self, config: ModelConfig, max_seq: int = 2048):
        shape = (config.n_layers, max_seq, config.n_kv_heads, config.head_dim)
        self.keys = np.zeros(shape, dtype=F32)
        self.values = np.zeros(shape, dtype=F32)
        self.length = 0
        self.max_seq = max_seq

    def clone(self) -> "KvCache":
        c = KvCache.__new__(KvCache)
        c.keys, c.values = self.keys.copy(), self.values.copy()
        c.length, c.max_seq = self.length, self.max_seq
        return c

    def write(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> None:
        if start < self.length:
            raise ValueError("kv cache is append-only")
        end = start + k.shape[0]
        if end > self.max_seq:
            raise CacheOverflowError(f"sequence length {end} exceeds max_seq {self.max_seq}")
        self.keys[layer, start:end] = k
        self.values[layer, start:end] = v


@dataclass
class LayerWeights:
    input_norm: np.ndarray
    q_bias: np.ndarray
    k_bias: np.ndarray
    v_bias: np.ndarray
    post_attn_norm: np.ndarray
    q_proj: Weight
    k_proj: Weight
    v_proj: Weight
    o_proj: Weight
    gate_proj: Weight
    up_proj: Weight
    down_proj: Weight


class Model:
    """An immutable loaded model; each session brings its own :class:`KvCache`."""

    def __init__(
        self,
        config: ModelConfig,
        tensors: Dict[str, object],
        workers: int = 1,
        max_seq: int = 2048,
        schedule: ChannelSchedule = ChannelSchedule(),
    ):
        self.config = config
        self.workers = workers
        self.max_seq = max_seq
        self.schedule = schedule
        self.rope = RopeParams(config.head_dim, config.rope_theta, max_seq)

        def f32(name):
            return np.asarray(tensors[name], dtype=F32)

        def linear(name):
            t = tensors[name]
            if isinstance(t, QuantizedTensor):
                return PackedTensor.from_quantized(t)
            return t if isinstance(t, PackedTensor) else f32(name)

        self.embed = f32("embed_tokens")
        self.lm_head = self.embed if config.tie_embeddings else f32("lm_head")
        self.final_norm = f32("final_norm")
        self.layers: List[LayerWeights] = []
        for i in range(config.n_layers):
            p = f"layers.{i}."
            self.layers.append(
                LayerWeights(
                    f32(p + "input_norm"), f32(p + "q_bias"), f32(p + "k_bias"), f32(p + "v_bias"),
                    f32(p + "post_attn_norm"),
                    *(linear(p + n) for n in ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")),
                )
            )

    @classmethod
    def load(cls, stem, **kwargs) -> "Model":
        config, tensors = read_model(stem)
        return cls(config, tensors, **kwargs)

    def new_cache(self) -> KvCache:
        return KvCache(self.config, self.max_seq)

    def linear(self, w: Weight, x: np.ndarray) -> np.ndarray:
        """``x @ W.T`` for ``x`` of shape ``[m, in]``."""
        if isinstance(w, PackedTensor):
            if w.channel_scale is not None:
                x = x / w.channel_scale.astype(F32)
            return qmatmul(w, x, self.schedule, self.workers)
        return matmul_f32(x, w.T)

    def layer_forward(self, i: int, x: np.ndarray, cache: KvCache, start: int, timer=NULL_TIMER) -> np.ndarray:
        """Run layer ``i`` on rows ``x`` (``[m, dim]``) at positions ``start..start+m``."""
        cfg, lw = self.config, self.layers[i]
        m = x.shape[0]
        with timer.section("rmsnorm"):
            h = rmsnorm(x, lw.input_norm, cfg.rms_eps)
        with timer.section("qkv_proj"):
            q = self.linear(lw.q_proj, h)
            k = self.linear(lw.k_proj, h)
            v = self.linear(lw.v_proj, h)
        with timer.section("qkv_bias"):
            q = q + lw.q_bias
            k = k + lw.k_bias
            v = v + lw.v_bias
        q = q.reshape(m, cfg.n_heads, cfg.head_dim)
        k = k.reshape(m, cfg.n_kv_heads, cfg.head_dim)
        v = v.reshape(m, cfg.n_kv_heads, cfg.head_dim)
        with timer.section("rope"):
            q = np.stack([rope_apply(q[r], start + r, self.rope) for r in range(m)])
            k = np.stack([rope_apply(k[r], start + r, self.rope) for r in range(m)])
        with timer.section("mha"):
            cache.write(i, start, k, v)
            attn = np.stack([
                causal_attention(q[r], cache.keys[i, : start + r + 1], cache.values[i, : start + r + 1], cfg.n_kv_heads)
                for r in range(m)
            ])
        with timer.section("out_proj"):
            x = x + self.linear(lw.o_proj, attn)
        with timer.section("rmsnorm"):
            h = rmsnorm(x, lw.post_attn_norm, cfg.rms_eps)
        with timer.section("ffn_gate_up"):
            gate = self.linear(lw.gate_proj, h)
            up = self.linear(lw.up_proj, h)
        with timer.section("silu"):
            act = silu(gate) * up
        with timer.section("ffn_down"):
            x = x + self.linear(lw.down_proj, act)
        return x

    def _check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise TokenError("empty token list")
        if np.any(ids < 0) or np.any(ids >= self.config.vocab_size):
            raise TokenError(f"token id out of range for vocab size {self.config.vocab_size}")
        return ids

    def forward(self, tokens: Sequence[int], cache: KvCache, timer=NULL_TIMER) -> np.ndarray:
        """Append ``tokens`` to ``cache``; return logits for the last one."""
        ids = self._check_tokens(tokens)
        start = cache.length
        if start + ids.size > cache.max_seq:
            raise CacheOverflowError(f"sequence length {start + ids.size} exceeds max_seq {cache.max_seq}")
        with timer.section("embed"):
            x = self.embed[ids].copy()
        for i in range(self.config.n_layers):
            x = self.layer_forward(i, x, cache, start, timer)
        cache.length = start + ids.size
        with timer.section("rmsnorm"):
            h = rmsnorm(x[-1:], self.final_norm, self.config.rms_eps)
        with timer.section("classifier"):
            logits = matmul_f32(h, self.lm_head.T)
        return logits[0]

    def prefill(self, tokens: Sequence[int], timer=NULL_TIMER):
        """Process a whole prompt at once; returns ``(logits, cache)``."""
        cache = self.new_cache()
        return self.forward(tokens, cache, timer), cache

    def decode_step(self, token: int, cache: KvCache, timer=NULL_TIMER) -> np.ndarray:
        return self.forward([token], cache, timer)

    def generate(self, prompt: Sequence[int], n_new: int, sampler=None, timer=NULL_TIMER) -> List[int]:
        """Prefill ``prompt`` then sample ``n_new`` tokens (greedy by default)."""
        if n_new < 0:
            raise ValueError("n_new must be nonnegative")
        sampler = sampler or Greedy()
        logits, cache = self.prefill(prompt, timer)
        out: List[int] = []
        for step in range(n_new):
            out.append(int(sampler(logits)))
            if step + 1 < n_new:
                logits = self.decode_step(out[-1], cache, timer)
        return out


class Greedy:
    def __call__(self, logits) -> int:
        # argmax returns the first maximum, i.e. the lowest index on ties
        return int(np.argmax(logits))


class Temperature:
    """Softmax sampling at temperature ``t`` from a seeded PCG64 stream."""

    def __init__(self, t: float, seed: int = 0):
        if not t > 0:
            raise ValueError("temperature must be positive")
        self.t = float(t)
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def __call__(self, logits) -> int:
        z = np.asarray(logits, dtype=np.float64) / self.t
        p = np.exp(z - z.max())
        cdf = np.cumsum(p)
        idx = int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right"))
        return min(idx, len(cdf) - 1)


class ByteTokenizer:
    """Byte-level ids; ids past 255 print via an optional piece table."""

    def __init__(self, pieces: Optional[List[str]] = None):
        self.pieces = pieces

    def encode(self, text: str) -> List[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        out = bytearray()
        parts = []
        for i in ids:
            if self.pieces is not None and i < len(self.pieces) and i >= 256:
                parts.append(out.decode("utf-8", "replace") + self.pieces[i])
                out = bytearray()
            elif i < 256:
                out.append(i)
            else:
                parts.append(out.decode("utf-8", "replace") + f"<{i}>")
                out = bytearray()
        parts.append(out.decode("utf-8", "replace"))
        return "".join(parts)
