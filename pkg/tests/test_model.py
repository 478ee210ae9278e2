import math

import numpy as np
import pytest

from awq_edge.container import write_model
from awq_edge.model import ByteTokenizer, CacheOverflowError, Greedy, Model, Temperature, TokenError
from awq_edge.quant import QuantizedTensor
from awq_edge.synth import quantize_model, synth_fp16

from conftest import small_config


def reference_forward(cfg, tensors, tokens):
    """Plain float64 loop over positions; returns last-position logits."""
    def W(name):
        t = tensors[name]
        if isinstance(t, QuantizedTensor):
            return t.dequantize().astype(np.float64), (None if t.channel_scale is None else t.channel_scale.astype(np.float64))
        return np.asarray(t, np.float64), None

    def lin(name, x):
        w, s = W(name)
        return w @ (x / s if s is not None else x)

    def norm(x, g):
        return np.asarray(g, np.float64) * x / math.sqrt(np.mean(x * x) + cfg.rms_eps)

    def rope(v, pos):
        half = cfg.head_dim // 2
        inv = cfg.rope_theta ** (-np.arange(half) * 2.0 / cfg.head_dim)
        a, b = v[:half], v[half:]
        c, s = np.cos(pos * inv), np.sin(pos * inv)
        return np.concatenate([a * c - b * s, a * s + b * c])

    emb = np.asarray(tensors["embed_tokens"], np.float64)
    ks = [[] for _ in range(cfg.n_layers)]
    vs = [[] for _ in range(cfg.n_layers)]
    hd, nh, nkv = cfg.head_dim, cfg.n_heads, cfg.n_kv_heads
    for pos, tok in enumerate(tokens):
        x = emb[tok].copy()
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            h = norm(x, tensors[p + "input_norm"])
            q = lin(p + "q_proj", h) + np.asarray(tensors[p + "q_bias"], np.float64)
            k = lin(p + "k_proj", h) + np.asarray(tensors[p + "k_bias"], np.float64)
            v = lin(p + "v_proj", h) + np.asarray(tensors[p + "v_bias"], np.float64)
            q = np.concatenate([rope(q[j * hd : (j + 1) * hd], pos) for j in range(nh)])
            k = np.concatenate([rope(k[j * hd : (j + 1) * hd], pos) for j in range(nkv)])
            ks[i].append(k)
            vs[i].append(v)
            out = []
            for j in range(nh):
                g = j // (nh // nkv)
                qh = q[j * hd : (j + 1) * hd]
                sc = np.array([qh @ kk[g * hd : (g + 1) * hd] for kk in ks[i]]) / math.sqrt(hd)
                w = np.exp(sc - sc.max())
                w /= w.sum()
                out.append(sum(w[t] * vs[i][t][g * hd : (g + 1) * hd] for t in range(len(w))))
            x = x + lin(p + "o_proj", np.concatenate(out))
            h = norm(x, tensors[p + "post_attn_norm"])
            gate = lin(p + "gate_proj", h)
            up = lin(p + "up_proj", h)
            x = x + lin(p + "down_proj", gate / (1 + np.exp(-gate)) * up)
    head = emb if cfg.tie_embeddings else np.asarray(tensors["lm_head"], np.float64)
    return head @ norm(x, tensors["final_norm"])


def make(seed=5, awq=False, **kw):
    cfg = small_config(**kw)
    qcfg, tensors = quantize_model(cfg, synth_fp16(cfg, seed=seed), awq=awq, calib_samples=8, seed=seed)
    return qcfg, tensors, Model(qcfg, tensors, max_seq=64)


def rel(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


class TestForward:
    @pytest.mark.parametrize("awq", [False, True])
    def test_matches_reference(self, awq):
        cfg, tensors, m = make(awq=awq)
        tokens = [3, 17, 60, 0, 42]
        logits, _ = m.prefill(tokens)
        assert rel(logits, reference_forward(cfg, tensors, tokens)) <= 1e-4

    def test_dense_model_matches_reference(self):
        cfg = small_config(quantized_tensors=[])
        tensors = synth_fp16(cfg, seed=2)
        m = Model(cfg, tensors)
        logits, _ = m.prefill([1, 2, 3])
        assert rel(logits, reference_forward(cfg, tensors, [1, 2, 3])) <= 1e-5

    def test_zero_layers_is_embedding_lookup(self):
        cfg = small_config(n_layers=0, quantized_tensors=[])
        tensors = synth_fp16(cfg, seed=4)
        tensors["final_norm"] = np.ones(cfg.dim, np.float16)
        logits, _ = Model(cfg, tensors).prefill([9])
        e = tensors["embed_tokens"].astype(np.float64)
        x = e[9] / math.sqrt(np.mean(e[9] ** 2) + cfg.rms_eps)
        np.testing.assert_allclose(logits, e @ x, rtol=1e-5, atol=1e-5)

    def test_zero_projections_pass_through(self):
        cfg = small_config(quantized_tensors=[])
        tensors = synth_fp16(cfg, seed=4)
        for name in cfg.projection_names():
            tensors[name] = np.zeros_like(tensors[name])
        m = Model(cfg, tensors)
        a, _ = m.prefill([7, 7, 7])
        b, _ = Model(small_config(n_layers=0, quantized_tensors=[]), tensors).prefill([7])
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)

    def test_position_matters(self):
        _, _, m = make()
        a, _ = m.prefill([5, 9])
        b, _ = m.prefill([9, 5])
        assert not np.array_equal(a, b)

    def test_all_zero_weights_give_flat_logits(self):
        cfg = small_config(quantized_tensors=[])
        tensors = {k: np.zeros_like(v) for k, v in synth_fp16(cfg).items()}
        logits, _ = Model(cfg, tensors).prefill([1, 2])
        assert np.all(logits == logits[0])

    def test_deterministic(self):
        _, _, m = make()
        a, _ = m.prefill([1, 2, 3])
        b, _ = m.prefill([1, 2, 3])
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("workers", [2, 4])
    def test_workers_do_not_change_bits(self, workers):
        cfg, tensors, m = make()
        other = Model(cfg, tensors, workers=workers)
        np.testing.assert_array_equal(m.prefill([4, 8, 15])[0], other.prefill([4, 8, 15])[0])

    def test_bad_tokens(self):
        _, _, m = make()
        with pytest.raises(TokenError):
            m.prefill([64])
        with pytest.raises(TokenError):
            m.prefill([-1])
        with pytest.raises(TokenError):
            m.prefill([])

    def test_tied_head_shares_storage(self):
        _, _, m = make()
        assert m.lm_head is m.embed

    def test_untied_head(self):
        cfg, tensors, m = make(tie_embeddings=False)
        assert m.lm_head is not m.embed
        logits, _ = m.prefill([2, 3])
        assert rel(logits, reference_forward(cfg, tensors, [2, 3])) <= 1e-4


class TestCache:
    def test_prefill_equals_stepping(self):
        _, _, m = make()
        tokens = [11, 22, 33, 44, 55, 6]
        full, _ = m.prefill(tokens)
        logits, cache = m.prefill(tokens[:1])
        for t in tokens[1:]:
            logits = m.decode_step(t, cache)
        assert np.max(np.abs(full - logits)) <= 1e-6 * max(1.0, np.max(np.abs(full)))

    def test_single_token_prefill_bit_equal_to_step(self):
        _, _, m = make()
        _, cache = m.prefill([1, 2])
        a = m.decode_step(3, cache.clone())
        b = m.forward([3], cache.clone())
        np.testing.assert_array_equal(a, b)

    def test_clone_is_independent(self):
        _, _, m = make()
        _, cache = m.prefill([1, 2])
        fork = cache.clone()
        a = m.decode_step(3, cache)
        m.decode_step(9, fork)
        b = m.decode_step(3, m.prefill([1, 2])[1])
        np.testing.assert_array_equal(a, b)
        assert cache.length == fork.length == 3

    def test_overflow(self):
        cfg, tensors, _ = make()
        m = Model(cfg, tensors, max_seq=4)
        _, cache = m.prefill([1, 2, 3, 4])
        with pytest.raises(CacheOverflowError):
            m.decode_step(5, cache)
        with pytest.raises(CacheOverflowError):
            m.prefill([1] * 5)


class TestGenerate:
    def test_zero_new_tokens(self):
        _, _, m = make()
        assert m.generate([1, 2], 0) == []

    def test_greedy_is_deterministic(self):
        _, _, m = make()
        a = m.generate([1, 2], 6)
        assert len(a) == 6 and a == m.generate([1, 2], 6)

    def test_greedy_follows_decode(self):
        _, _, m = make()
        out = m.generate([1, 2], 3)
        logits, cache = m.prefill([1, 2])
        expect = []
        for _ in range(3):
            expect.append(int(np.argmax(logits)))
            logits = m.decode_step(expect[-1], cache)
        assert out == expect

    def test_greedy_ties_pick_lowest(self):
        assert Greedy()(np.zeros(10)) == 0
        assert Greedy()(np.array([0.0, 2.0, 1.0, 2.0])) == 1

    def test_temperature_seeded(self):
        _, _, m = make()
        a = m.generate([1], 8, Temperature(1.0, seed=3))
        assert a == m.generate([1], 8, Temperature(1.0, seed=3))

    def test_temperature_distribution(self):
        s = Temperature(1.0, seed=0)
        logits = np.log(np.array([0.7, 0.2, 0.1]))
        counts = np.bincount([s(logits) for _ in range(4000)], minlength=3) / 4000
        np.testing.assert_allclose(counts, [0.7, 0.2, 0.1], atol=0.03)

    def test_bad_arguments(self):
        _, _, m = make()
        with pytest.raises(ValueError):
            m.generate([1], -1)
        with pytest.raises(ValueError):
            Temperature(0.0)


def test_load_from_file(tmp_path):
    cfg, tensors, m = make()
    write_model(tmp_path / "m", cfg, tensors)
    loaded = Model.load(tmp_path / "m")
    np.testing.assert_array_equal(loaded.prefill([5, 6])[0], m.prefill([5, 6])[0])


def test_byte_tokenizer_round_trip():
    tok = ByteTokenizer()
    ids = tok.encode("héllo")
    assert all(0 <= i < 256 for i in ids)
    assert tok.decode(ids) == "héllo"
