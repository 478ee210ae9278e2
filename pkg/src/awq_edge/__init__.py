"""INT4 activation-aware quantization, AWQ_MACRO packing, an emulated
PE-array kernel and a small Qwen2.5-style decoder runtime."""
from .config import ModelConfig, load_config, shipped_config
from .container import packed_size, read_model, write_model
from .kernel import qmatmul, qmatvec
from .macro import AwqMacro, ChannelSchedule, PackedTensor, layout_tensor, pack_macro, unpack_macro
from .model import ByteTokenizer, Greedy, KvCache, Model, Temperature
from .quant import QuantizedTensor, awq_search_channel_scales, quantize_tensor

__all__ = [
    "AwqMacro", "ByteTokenizer", "ChannelSchedule", "Greedy", "KvCache", "Model", "ModelConfig",
    "PackedTensor", "QuantizedTensor", "Temperature", "awq_search_channel_scales", "layout_tensor",
    "load_config", "pack_macro", "packed_size", "qmatmul", "qmatvec", "quantize_tensor", "read_model",
    "shipped_config", "unpack_macro", "write_model",
]
__version__ = "0.1.0"
