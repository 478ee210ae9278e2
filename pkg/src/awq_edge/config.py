"""Model architecture config and the tensor naming scheme."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import List, Optional

PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    dim: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    ffn_hidden: int
    vocab_size: int
    group_size: int = 64
    rope_theta: float = 1_000_000.0
    rms_eps: float = 1e-6
    tie_embeddings: bool = True
    # None means every projection; [] means a plain FP16 model
    quantized_tensors: Optional[List[str]] = None
    awq_channel_scales: bool = False
    vocab: Optional[List[str]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.quantized_tensors is None:
            self.quantized_tensors = self.projection_names()
        self.validate()

    @property
    def q_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def validate(self) -> None:
        for name in ("dim", "n_layers", "n_heads", "n_kv_heads", "head_dim", "ffn_hidden", "vocab_size", "group_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0 or (v == 0 and name != "n_layers"):
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.dim != self.n_heads * self.head_dim:
            raise ConfigError(f"dim {self.dim} != n_heads * head_dim ({self.n_heads} * {self.head_dim})")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if not self.rope_theta > 0 or not self.rms_eps > 0:
            raise ConfigError("rope_theta and rms_eps must be positive")
        known = set(self.projection_names())
        for name in self.quantized_tensors:
            if name not in known:
                raise ConfigError(f"quantized tensor {name!r} is not a projection of this model")
            out, inp = self.linear_shape(name)
            if out % 8 or inp % self.group_size:
                raise ConfigError(f"{name} [{out}x{inp}] not packable at group size {self.group_size}")

    def linear_shape(self, name: str):
        proj = name.rsplit(".", 1)[-1]
        return {
            "q_proj": (self.q_dim, self.dim),
            "k_proj": (self.kv_dim, self.dim),
            "v_proj": (self.kv_dim, self.dim),
            "o_proj": (self.dim, self.q_dim),
            "gate_proj": (self.ffn_hidden, self.dim),
            "up_proj": (self.ffn_hidden, self.dim),
            "down_proj": (self.dim, self.ffn_hidden),
        }[proj]

    def projection_names(self) -> List[str]:
        return [f"layers.{i}.{p}" for i in range(self.n_layers) for p in PROJECTIONS]

    def fp16_tensor_shapes(self) -> dict:
        """Name -> shape of every tensor that always stays half precision."""
        shapes = {"embed_tokens": (self.vocab_size, self.dim)}
        for i in range(self.n_layers):
            shapes[f"layers.{i}.input_norm"] = (self.dim,)
            shapes[f"layers.{i}.q_bias"] = (self.q_dim,)
            shapes[f"layers.{i}.k_bias"] = (self.kv_dim,)
            shapes[f"layers.{i}.v_bias"] = (self.kv_dim,)
            shapes[f"layers.{i}.post_attn_norm"] = (self.dim,)
        shapes["final_norm"] = (self.dim,)
        if not self.tie_embeddings:
            shapes["lm_head"] = (self.vocab_size, self.dim)
        return shapes

    def tensor_shapes(self) -> dict:
        """Every tensor in file order: unquantized projections are FP16 too."""
        shapes = self.fp16_tensor_shapes()
        for name in self.projection_names():
            shapes[name] = self.linear_shape(name)
        return shapes

    def param_count(self) -> int:
        total = 0
        for shape in self.tensor_shapes().values():
            n = 1
            for d in shape:
                n *= d
            total += n
        return total

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["vocab"] is None:
            del d["vocab"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        if "quantized_tensors" not in changes and d["quantized_tensors"] == self.projection_names():
            d["quantized_tensors"] = None  # re-derive for the new shape
        d.update(changes)
        return ModelConfig.from_dict(d)


def load_config(path) -> ModelConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        return ModelConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def shipped_config(name: str) -> ModelConfig:
    """Load one of the bundled configs: ``qwen2.5-0.5b`` or ``tiny``."""
    fname = {"qwen2.5-0.5b": "qwen2_5_0_5b.json", "tiny": "tiny.json"}[name]
    text = resources.files("awq_edge").joinpath("configs").joinpath(fname).read_text()
    return ModelConfig.from_dict(json.loads(text))
