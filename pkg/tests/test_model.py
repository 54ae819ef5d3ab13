from __future__ import annotations

import numpy as np
import pytest

from cushionlab import tensor as T
from cushionlab.data import VOCAB_SIZE
from cushionlab.model import (
    CacheMismatchError,
    KVCache,
    LengthError,
    NumericalError,
    PrefixCache,
    TrainSettings,
    TransformerConfig,
    decode_step,
    extract_prefix_cache,
    forward,
    init_params,
    next_token_loss,
    perplexity,
    quantize_model_weights,
    smooth_model,
    train_toy,
    unigram_entropy,
)
from cushionlab.quant import QuantSpec, calibrate
from cushionlab.tensor import Tensor

from .conftest import small_model, text_ids


def _reference_forward(model, tokens: np.ndarray) -> np.ndarray:
    """Plain float64 loop implementation, no cache or prefix machinery."""
    cfg = model.config
    p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    t = len(tokens)
    h, dh = cfg.n_heads, cfg.head_dim

    def norm(x, name):
        if cfg.norm == "pre-rms":
            return x / np.sqrt((x**2).mean(-1, keepdims=True) + 1e-5) * p[name + ".g"]
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * p[name + ".g"] + p[name + ".b"]

    x = p["tok_emb"][tokens] + p["pos_emb"][:t]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        a = norm(x, pre + "attn_norm") if cfg.norm == "pre-rms" else x
        q, k, v = (a @ p[pre + w] for w in ("wq", "wk", "wv"))
        out = np.zeros_like(x)
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            for r in range(t):
                s = q[r, sl] @ k[: r + 1, sl].T / np.sqrt(dh)
                w = np.exp(s - s.max())
                out[r, sl] = (w / w.sum()) @ v[: r + 1, sl]
        att = out @ p[pre + "wo"]
        if cfg.norm == "pre-rms":
            x = x + att
            m = norm(x, pre + "mlp_norm")
        else:
            x = norm(x + att, pre + "attn_norm")
            m = x
        if cfg.activation == "swiglu":
            g = m @ p[pre + "w_gate"]
            hid = g / (1 + np.exp(-g)) * (m @ p[pre + "w_up"])
        else:
            u = m @ p[pre + "w_up"]
            hid = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u**3)))
        mo = hid @ p[pre + "w_down"]
        x = x + mo if cfg.norm == "pre-rms" else norm(x + mo, pre + "mlp_norm")
    if cfg.norm == "pre-rms":
        x = norm(x, "final_norm")
    return x @ p["lm_head"]


def test_forward_matches_reference(model, rng):
    tokens = text_ids(rng, 12)
    logits, _ = forward(model, tokens)
    np.testing.assert_allclose(logits.data, _reference_forward(model, tokens), atol=1e-4, rtol=1e-4)


def test_taps_cover_every_projection_input(model, rng):
    _, taps = forward(model, text_ids(rng, 10, 2))
    assert sorted(taps.acts) == sorted(model.tap_names)
    assert all(a.shape == (2, 10, model.config.d_model) for a in taps.acts.values())


def test_attention_rows_normalise(model, rng):
    prefix = extract_prefix_cache(model, text_ids(rng, 4))
    _, taps = forward(model, text_ids(rng, 9), prefix=prefix, capture_attn=True)
    for att in taps.attn.values():
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-5)
        assert att.shape[-1] == 13


def test_causality(model, rng):
    tokens = text_ids(rng, 16)
    base, _ = forward(model, tokens)
    j = 9
    bumped = tokens.copy()
    bumped[j] = (bumped[j] + 1) % VOCAB_SIZE
    out, _ = forward(model, bumped)
    np.testing.assert_array_equal(out.data[:j], base.data[:j])
    assert not np.allclose(out.data[j:], base.data[j:])


def test_decode_one_after_prompt(model, rng):
    tokens = text_ids(rng, 11)
    full, _ = forward(model, tokens)
    _, cache = decode_step(model, KVCache.empty(model), tokens[:10])
    last, cache = decode_step(model, cache, tokens[10:])
    assert cache.length == 11
    assert np.abs(last.data[-1] - full.data[-1]).max() < 1e-5


def test_chunked_prefill_matches_one_shot(model, rng):
    tokens = text_ids(rng, 30)
    full, _ = forward(model, tokens)
    cache = KVCache.empty(model)
    rows = []
    for chunk in np.split(tokens, [3, 4, 17, 25]):
        out, cache = decode_step(model, cache, chunk)
        rows.append(out.data)
    np.testing.assert_allclose(np.concatenate(rows), full.data, atol=1e-5)


def test_decode_empty_is_noop(llama):
    cache = KVCache.empty(llama)
    out, same = decode_step(llama, cache, np.zeros(0, dtype=np.int64))
    assert out is None and same is cache


def test_prefix_equals_literal_prepend(model, rng):
    prompt, text = text_ids(rng, 5), text_ids(rng, 12)
    prefix = extract_prefix_cache(model, prompt)
    assert prefix.m == 5 and all(k.shape[0] == 5 for k in prefix.keys)
    cached, _ = forward(model, text, prefix=prefix)
    literal, _ = forward(model, np.concatenate([prompt, text]))
    np.testing.assert_allclose(cached.data, literal.data[5:], atol=1e-5)


def test_single_token_prefix_equals_literal(model, rng):
    text = text_ids(rng, 8)
    prefix = extract_prefix_cache(model, [256])
    cached, _ = forward(model, text, prefix=prefix)
    literal, _ = forward(model, np.concatenate([[256], text]))
    np.testing.assert_allclose(cached.data, literal.data[1:], atol=1e-5)


def test_extraction_is_deterministic(llama):
    a = extract_prefix_cache(llama, [256, 10, 65])
    b = extract_prefix_cache(llama, [256, 10, 65])
    for x, y in zip(a.keys + a.values, b.keys + b.values):
        assert x.data.tobytes() == y.data.tobytes()
    assert a.provenance == "greedy-init" and a.tokens == [256, 10, 65]


def test_extract_rejects_empty(llama):
    with pytest.raises(ValueError):
        extract_prefix_cache(llama, [])


def test_wide_grid_quant_close_to_fp(model, rng):
    tokens = text_ids(rng, 20, 2)
    fp, _ = forward(model, tokens)
    q, _ = forward(model, tokens, quant=QuantSpec(bits=16))
    assert np.abs(q.data - fp.data).max() < 1e-2


def test_wide_grid_perplexity_within_one_percent(llama, rng):
    tokens = text_ids(rng, 200)
    fp = perplexity(llama, tokens, window=64)
    q = perplexity(llama, tokens, quant=QuantSpec(bits=16), window=64)
    assert abs(q - fp) / fp < 0.01


def test_uniform_logits_perplexity_is_vocab(llama, rng):
    zeroed = llama.with_params({"lm_head": np.zeros_like(llama["lm_head"].data)})
    assert perplexity(zeroed, text_ids(rng, 100), window=32) == pytest.approx(VOCAB_SIZE, rel=1e-5)


def test_perplexity_matches_loop_oracle(llama, rng):
    tokens = text_ids(rng, 70)
    nll = []
    for start in range(0, 70, 32):
        chunk = tokens[start : start + 32]
        if len(chunk) < 2:
            continue
        ref = _reference_forward(llama, chunk)
        for i in range(len(chunk) - 1):
            row = ref[i] - ref[i].max()
            nll.append(np.log(np.exp(row).sum()) - row[chunk[i + 1]])
    assert perplexity(llama, tokens, window=32) == pytest.approx(float(np.exp(np.mean(nll))), rel=1e-4)


def test_perplexity_rejects_short_text(llama):
    with pytest.raises(ValueError):
        perplexity(llama, [65])


def test_context_overflow(llama, rng):
    prefix = extract_prefix_cache(llama, text_ids(rng, 10))
    with pytest.raises(LengthError):
        forward(llama, text_ids(rng, 90), prefix=prefix)


def test_cache_from_other_shape_rejected(llama):
    other = small_model(d_model=64)
    prefix = extract_prefix_cache(other, [65, 66])
    with pytest.raises(CacheMismatchError):
        forward(llama, [65, 66], prefix=prefix)


def test_out_of_range_token(llama):
    with pytest.raises(ValueError):
        forward(llama, [VOCAB_SIZE])


def test_batched_prefix_matches_shared(llama, rng):
    prefix = extract_prefix_cache(llama, [256, 10])
    text = text_ids(rng, 10, 3)
    shared, _ = forward(llama, text, prefix=prefix)
    batched = PrefixCache([Tensor(np.repeat(k.data[None], 3, 0)) for k in prefix.keys],
                          [Tensor(np.repeat(v.data[None], 3, 0)) for v in prefix.values])
    per, _ = forward(llama, text, prefix=batched)
    np.testing.assert_allclose(per.data, shared.data, atol=1e-6)


def test_smoothing_preserves_fp_logits(model, rng):
    seqs = text_ids(rng, 24, 4)
    smoothed = smooth_model(model, calibrate(model, seqs), alpha=0.8)
    a, _ = forward(model, seqs)
    b, _ = forward(smoothed, seqs)
    assert np.abs(a.data - b.data).max() < 1e-4


def test_weight_quantization_changes_only_projections(llama):
    q = quantize_model_weights(llama, QuantSpec(bits=4, symmetric=True, granularity="per-channel-group",
                                                group_size=16))
    assert q["tok_emb"].data.tobytes() == llama["tok_emb"].data.tobytes()
    assert q["layers.0.wq"].data.tobytes() != llama["layers.0.wq"].data.tobytes()
    assert llama["layers.0.wq"].data.tobytes() != q["layers.0.wq"].data.tobytes()


def test_next_token_loss_gradient(llama, rng):
    m = init_params(llama.config, seed=3)
    for p in m.parameters():
        p.requires_grad = True
    loss, _ = next_token_loss(m, text_ids(rng, 12, 2))
    grads = T.backward(loss)
    assert set(grads) == set(m.parameters())
    assert not grads[m["pos_emb"]][12:].any()


# -- training -----------------------------------------------------------------------

TINY = TransformerConfig.preset("llama-ish", d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32)
FAST = TrainSettings(steps=3, batch_size=2, seq_len=16, warmup=1)


def test_training_is_deterministic():
    corpus = np.frombuffer(b"the quick brown fox jumps over the lazy dog. " * 20, dtype=np.uint8).astype(np.int64)
    a = train_toy(TINY, corpus, seed=5, settings=FAST)
    b = train_toy(TINY, corpus, seed=5, settings=FAST)
    assert a.checksum() == b.checksum()
    assert not any(p.requires_grad for p in a.parameters())


def test_one_step_changes_weights():
    corpus = np.frombuffer(b"abcdefgh" * 40, dtype=np.uint8).astype(np.int64)
    start = init_params(TINY, seed=0)
    trained = train_toy(TINY, corpus, seed=0, settings=TrainSettings(steps=1, batch_size=2, seq_len=16, warmup=0))
    assert trained.checksum() != start.checksum()


def test_training_beats_unigram_baseline():
    corpus = np.frombuffer(b"abcabcabdabcabcabd " * 60, dtype=np.uint8).astype(np.int64)
    settings = TrainSettings(steps=60, batch_size=8, seq_len=24, lr=1e-2, warmup=5)
    m = train_toy(TINY, corpus, seed=0, settings=settings)
    assert m.meta["final_loss"] < unigram_entropy(corpus)


def test_divergence_aborts():
    corpus = np.frombuffer(b"abcdefgh" * 40, dtype=np.uint8).astype(np.int64)
    with pytest.raises(NumericalError):
        train_toy(TINY, corpus, seed=0, settings=TrainSettings(steps=5, batch_size=2, seq_len=16, lr=float("nan")))
