import numpy as np
import pytest

from awq_edge.config import ModelConfig, shipped_config
from awq_edge.synth import quantize_model, synth_fp16


def small_config(**kw):
    base = dict(dim=16, n_layers=2, n_heads=2, n_kv_heads=1, head_dim=8, ffn_hidden=32,
                vocab_size=64, group_size=8, rope_theta=10000.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_quantized():
    cfg = shipped_config("tiny")
    fp = synth_fp16(cfg, seed=7)
    return quantize_model(cfg, fp, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; asserts ``ok``."""
    def record(n, ok, detail):
        _CRITERIA[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_CRITERIA[n])
        assert ok, _CRITERIA[n]
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
