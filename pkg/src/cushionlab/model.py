"""Toy decoder-only transformer with KV caching, prefix injection and
activation taps.

Two presets are provided: ``llama-ish`` (pre-RMSNorm, SwiGLU) and
``gpt-ish`` (post-LayerNorm, GELU). Positions are learned absolute
embeddings; anything already in the cache (an injected prefix, previously
decoded tokens) occupies the first positions and new tokens continue from
there.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import tensor as T
from .data import BOS, VOCAB_SIZE
from .optim import Adam, cosine_lr
from .quant import CalibrationStats, QuantSpec, _tap_params, fake_quant_ste, quantize_weight, smooth_migrate
from .tensor import Tensor

log = logging.getLogger(__name__)

PRESETS: dict[str, dict[str, str]] = {
    "llama-ish": {"norm": "pre-rms", "activation": "swiglu"},
    "gpt-ish": {"norm": "post-ln", "activation": "gelu"},
}
PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


class LengthError(ValueError):
    pass


class CacheMismatchError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 384
    max_seq_len: int = 512
    norm: str = "pre-rms"
    activation: str = "swiglu"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.norm not in ("pre-rms", "post-ln"):
            raise ValueError(f"unknown norm style {self.norm!r}")
        if self.activation not in ("swiglu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> TransformerConfig:
        if name not in PRESETS:
            raise ValueError(f"unknown architecture preset {name!r}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def arch(self) -> str:
        for name, p in PRESETS.items():
            if p == {"norm": self.norm, "activation": self.activation}:
                return name
        return f"{self.norm}+{self.activation}"


@dataclass
class TransformerModel:
    config: TransformerConfig
    params: dict[str, Tensor]
    meta: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def get(self, name: str) -> Tensor | None:
        return self.params.get(name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> TransformerModel:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype: Any) -> TransformerModel:
        return replace(self, params={k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()},
                       meta=dict(self.meta))

    def with_params(self, updates: dict[str, np.ndarray]) -> TransformerModel:
        params = dict(self.params)
        for k, v in updates.items():
            params[k] = Tensor(np.asarray(v, dtype=self.dtype))
        return replace(self, params=params, meta=dict(self.meta))

    @property
    def dtype(self) -> np.dtype:
        return self.params["tok_emb"].dtype

    @property
    def tap_names(self) -> list[str]:
        return [f"L{i}.{kind}" for i in range(self.config.n_layers) for kind in ("attn_in", "mlp_in")]


def init_params(config: TransformerConfig, seed: int = 0, dtype: Any = np.float32) -> TransformerModel:
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    std = 0.02
    out_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape: tuple[int, ...], s: float = std) -> np.ndarray:
        return (rng.standard_normal(shape) * s).astype(dtype)

    params: dict[str, np.ndarray] = {
        "tok_emb": normal((config.vocab_size, d)),
        "pos_emb": normal((config.max_seq_len, d)),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        params[pre + "attn_norm.g"] = np.ones(d, dtype)
        params[pre + "mlp_norm.g"] = np.ones(d, dtype)
        if config.norm == "post-ln":
            params[pre + "attn_norm.b"] = np.zeros(d, dtype)
            params[pre + "mlp_norm.b"] = np.zeros(d, dtype)
        for w in ("wq", "wk", "wv"):
            params[pre + w] = normal((d, d))
        params[pre + "wo"] = normal((d, d), out_std)
        if config.activation == "swiglu":
            params[pre + "w_gate"] = normal((d, f))
        params[pre + "w_up"] = normal((d, f))
        params[pre + "w_down"] = normal((f, d), out_std)
    if config.norm == "pre-rms":
        params["final_norm.g"] = np.ones(d, dtype)
    params["lm_head"] = normal((d, config.vocab_size))
    return TransformerModel(config, {k: Tensor(v) for k, v in params.items()})


# -- caches and tap records ---------------------------------------------------


@dataclass
class KVBlock:
    """Per-layer keys and values, each ``[len, H, Dh]`` (shared across the
    batch) or ``[B, len, H, Dh]``."""

    keys: list[Tensor]
    values: list[Tensor]

    @property
    def length(self) -> int:
        return self.keys[0].shape[-3] if self.keys else 0

    @property
    def batched(self) -> bool:
        return bool(self.keys) and self.keys[0].ndim == 4

    def check(self, config: TransformerConfig) -> None:
        if len(self.keys) != config.n_layers or len(self.values) != config.n_layers:
            raise CacheMismatchError(
                f"cache has {len(self.keys)} layers, model has {config.n_layers}")
        lengths = set()
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape or k.shape[-2:] != (config.n_heads, config.head_dim):
                raise CacheMismatchError(
                    f"cache block {k.shape} incompatible with {config.n_heads} heads of "
                    f"size {config.head_dim}")
            lengths.add(k.shape[-3])
        if len(lengths) > 1:
            raise CacheMismatchError(f"layers disagree on cached length: {sorted(lengths)}")

    def numpy_blocks(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [k.data for k in self.keys], [v.data for v in self.values]


@dataclass
class KVCache(KVBlock):
    @classmethod
    def empty(cls, model: TransformerModel, batch: int = 1) -> KVCache:
        c = model.config
        z = np.zeros((batch, 0, c.n_heads, c.head_dim), dtype=model.dtype)
        return cls([Tensor(z) for _ in range(c.n_layers)], [Tensor(z) for _ in range(c.n_layers)])


@dataclass
class PrefixCache(KVBlock):
    provenance: str = "greedy-init"
    tokens: list[int] | None = None

    @property
    def m(self) -> int:
        return self.length

    def parameters(self) -> list[Tensor]:
        return [*self.keys, *self.values]

    def copy(self, requires_grad: bool = False, provenance: str | None = None) -> PrefixCache:
        return PrefixCache(
            [Tensor(k.data.copy(), requires_grad=requires_grad) for k in self.keys],
            [Tensor(v.data.copy(), requires_grad=requires_grad) for v in self.values],
            provenance=provenance or self.provenance,
            tokens=None if self.tokens is None else list(self.tokens),
        )

    def astype(self, dtype: Any) -> PrefixCache:
        return PrefixCache([Tensor(k.data.astype(dtype)) for k in self.keys],
                           [Tensor(v.data.astype(dtype)) for v in self.values],
                           self.provenance, self.tokens)


@dataclass
class TapRecord:
    """Activations entering each block's projections (before any fake
    quantization), optional attention maps and the content boundary.

    ``acts[name]`` is ``[B, T, d]``; ``attn[layer]`` is ``[B, H, T, S]`` where
    ``S`` covers cached positions followed by the ``T`` new ones.
    ``content_start`` counts leading tokens of the input that are a literal
    prompt rather than content."""

    acts: dict[str, Tensor] = field(default_factory=dict)
    attn: dict[int, np.ndarray] = field(default_factory=dict)
    content_start: int = 0
    cached_len: int = 0

    @property
    def n_tokens(self) -> int:
        return next(iter(self.acts.values())).shape[1] if self.acts else 0

    def content_mask(self) -> np.ndarray:
        mask = np.ones(self.n_tokens, dtype=bool)
        mask[: self.content_start] = False
        return mask

    def prefix_columns(self) -> int:
        """Key columns that belong to a prefix: the injected cache plus any
        literal prompt tokens."""
        return self.cached_len + self.content_start


# -- forward ------------------------------------------------------------------


def _norm(model: TransformerModel, x: Tensor, name: str) -> Tensor:
    if model.config.norm == "pre-rms":
        return T.rmsnorm(x, model[name + ".g"])
    return T.layernorm(x, model[name + ".g"], model[name + ".b"])


def _causal_mask(t: int, past: int) -> np.ndarray:
    cols = np.arange(past + t)[None, :]
    rows = np.arange(t)[:, None]
    return (cols < past) | (cols - past <= rows)


@dataclass
class _Run:
    logits: Tensor
    taps: TapRecord
    keys: list[Tensor]
    values: list[Tensor]


def _run(
    model: TransformerModel,
    tokens: np.ndarray,
    past: KVBlock | None,
    quant: QuantSpec | None,
    stats: CalibrationStats | None,
    content_start: int,
    capture_attn: bool,
) -> _Run:
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    plen = 0
    if past is not None:
        past.check(cfg)
        plen = past.length
        if past.batched and past.keys[0].shape[0] not in (1, b):
            raise CacheMismatchError(f"cache batch {past.keys[0].shape[0]} vs input batch {b}")
    if plen + t > cfg.max_seq_len:
        raise LengthError(f"context of {plen} cached + {t} new tokens exceeds max_seq_len {cfg.max_seq_len}")
    if not 0 <= content_start < max(t, 1):
        raise ValueError(f"content_start {content_start} leaves no content in {t} tokens")

    h, dh = cfg.n_heads, cfg.head_dim
    taps = TapRecord(content_start=content_start, cached_len=plen)
    x = T.embed_lookup(model["tok_emb"], tokens) + model["pos_emb"][plen : plen + t]
    mask = _causal_mask(t, plen)
    scale = 1.0 / math.sqrt(dh)
    new_k: list[Tensor] = []
    new_v: list[Tensor] = []

    def project_input(act: Tensor, layer: int, kind: str) -> Tensor:
        name = f"L{layer}.{kind}"
        smooth = model.get(f"layers.{layer}.{kind}.smooth")
        if smooth is not None:
            act = act * Tensor(1.0 / smooth.data)
        taps.acts[name] = act
        if quant is None:
            return act
        content = act.data[:, content_start:, :]
        params = _tap_params(name, content, quant, stats)
        return fake_quant_ste(act, params, quant)

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        a_in = _norm(model, x, pre + "attn_norm") if cfg.norm == "pre-rms" else x
        xa = project_input(a_in, i, "attn_in")
        q = (xa @ model[pre + "wq"]).reshape(b, t, h, dh)
        k = (xa @ model[pre + "wk"]).reshape(b, t, h, dh)
        v = (xa @ model[pre + "wv"]).reshape(b, t, h, dh)
        new_k.append(k)
        new_v.append(v)
        if plen:
            pk, pv = past.keys[i], past.values[i]
            if pk.ndim == 3 or pk.shape[0] != b:
                pk = T.broadcast_to(pk, (b, plen, h, dh))
                pv = T.broadcast_to(pv, (b, plen, h, dh))
            k = T.concat([pk, k], axis=1)
            v = T.concat([pv, v], axis=1)
        scores = (q.transpose(0, 2, 1, 3) @ k.transpose(0, 2, 3, 1)) * scale
        att = T.softmax(scores, axis=-1, mask=mask)
        if capture_attn:
            taps.attn[i] = att.data
        o = (att @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        attn_out = o @ model[pre + "wo"]

        if cfg.norm == "pre-rms":
            x = x + attn_out
            m_in = _norm(model, x, pre + "mlp_norm")
        else:
            x = _norm(model, x + attn_out, pre + "attn_norm")
            m_in = x
        xm = project_input(m_in, i, "mlp_in")
        if cfg.activation == "swiglu":
            hidden = T.silu(xm @ model[pre + "w_gate"]) * (xm @ model[pre + "w_up"])
        else:
            hidden = T.gelu(xm @ model[pre + "w_up"])
        mlp_out = hidden @ model[pre + "w_down"]
        if cfg.norm == "pre-rms":
            x = x + mlp_out
        else:
            x = _norm(model, x + mlp_out, pre + "mlp_norm")

    if cfg.norm == "pre-rms":
        x = T.rmsnorm(x, model["final_norm.g"])
    logits = x @ model["lm_head"]
    return _Run(logits, taps, new_k, new_v)


def _as_batch(tokens: Any) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {arr.shape}")
    return arr, False


def forward(
    model: TransformerModel,
    tokens: Any,
    prefix: KVBlock | None = None,
    quant: QuantSpec | None = None,
    stats: CalibrationStats | None = None,
    content_start: int = 0,
    capture_attn: bool = False,
) -> tuple[Tensor, TapRecord]:
    """Logits for ``tokens`` conditioned on an optional cached ``prefix``.

    With ``quant`` set, every tapped activation is fake-quantized before the
    matmul that consumes it; dynamic ranges come from content positions only.
    A 1-D ``tokens`` yields ``[T, V]`` logits, a 2-D batch ``[B, T, V]``.
    """
    batch, squeeze = _as_batch(tokens)
    run = _run(model, batch, prefix, quant, stats, content_start, capture_attn)
    logits = run.logits[0] if squeeze else run.logits
    return logits, run.taps


def decode_step(model: TransformerModel, cache: KVCache, new_tokens: Any) -> tuple[Tensor | None, KVCache]:
    """Process ``new_tokens`` against ``cache``; returns their logits and the
    extended cache. The input cache is left untouched."""
    cache.check(model.config)
    batch, squeeze = _as_batch(new_tokens)
    if batch.shape[1] == 0:
        return None, cache
    run = _run(model, batch, cache if cache.length else None, None, None, 0, False)
    keys, values = [], []
    for i in range(model.config.n_layers):
        ck, cv = cache.keys[i].data, cache.values[i].data
        if ck.ndim == 3:
            ck, cv = ck[None], cv[None]
        if ck.shape[0] != batch.shape[0]:
            ck = np.broadcast_to(ck, (batch.shape[0], *ck.shape[1:]))
            cv = np.broadcast_to(cv, (batch.shape[0], *cv.shape[1:]))
        keys.append(Tensor(np.concatenate([ck, run.keys[i].data], axis=1)))
        values.append(Tensor(np.concatenate([cv, run.values[i].data], axis=1)))
    logits = run.logits[0] if squeeze else run.logits
    return logits, KVCache(keys, values)


def extract_prefix_cache(model: TransformerModel, prompt: Any, past: KVBlock | None = None) -> PrefixCache:
    """Keys/values of ``prompt`` from a clean FP forward pass."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValueError("cannot extract a prefix cache from an empty prompt")
    run = _run(model, prompt[None, :], past, None, None, 0, False)
    keys = [k.data[0].copy() for k in run.keys]
    values = [v.data[0].copy() for v in run.values]
    if past is not None and past.length:
        pk, pv = past.numpy_blocks()
        keys = [np.concatenate([p.reshape(-1, *k.shape[1:]), k]) for p, k in zip(pk, keys)]
        values = [np.concatenate([p.reshape(-1, *v.shape[1:]), v]) for p, v in zip(pv, values)]
    return PrefixCache([Tensor(k) for k in keys], [Tensor(v) for v in values],
                       provenance="greedy-init", tokens=[int(t) for t in prompt])


def empty_prefix(model: TransformerModel) -> PrefixCache:
    c = model.config
    z = np.zeros((0, c.n_heads, c.head_dim), dtype=model.dtype)
    return PrefixCache([Tensor(z) for _ in range(c.n_layers)], [Tensor(z) for _ in range(c.n_layers)],
                       provenance="empty", tokens=[])


def prefix_or_none(prefix: KVBlock | None) -> KVBlock | None:
    return prefix if prefix is not None and prefix.length else None


# -- evaluation ---------------------------------------------------------------


def next_token_loss(
    model: TransformerModel,
    batch: np.ndarray,
    prefix: KVBlock | None = None,
    quant: QuantSpec | None = None,
    stats: CalibrationStats | None = None,
    capture_attn: bool = False,
) -> tuple[Tensor, TapRecord]:
    """Mean cross entropy of predicting ``batch[:, 1:]``; prefix positions
    never enter the loss because they are never in ``batch``."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None]
    if batch.shape[1] < 2:
        raise ValueError("need at least two tokens to score next-token prediction")
    logits, taps = forward(model, batch, prefix_or_none(prefix), quant, stats, capture_attn=capture_attn)
    return T.cross_entropy(logits[:, :-1, :], batch[:, 1:]), taps


def perplexity(
    model: TransformerModel,
    tokens: Any,
    prefix: KVBlock | None = None,
    quant: QuantSpec | None = None,
    stats: CalibrationStats | None = None,
    window: int = 128,
    batch_size: int = 8,
) -> float:
    """exp of the mean next-token cross entropy over ``tokens``, scored in
    non-overlapping windows that each see the prefix afresh."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 2:
        raise ValueError("text too short for perplexity (need >= 2 tokens)")
    m = prefix.length if prefix is not None else 0
    window = max(2, min(window, model.config.max_seq_len - m))
    chunks = [tokens[i : i + window] for i in range(0, len(tokens), window)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks.pop()
    total, count = 0.0, 0
    full = [c for c in chunks if len(c) == window]
    rest = [c for c in chunks if len(c) != window]
    groups = [full[i : i + batch_size] for i in range(0, len(full), batch_size)] + [[c] for c in rest]
    for group in groups:
        batch = np.stack(group)
        loss, _ = next_token_loss(model, batch, prefix, quant, stats)
        n = batch.shape[0] * (batch.shape[1] - 1)
        total += float(loss.data) * n
        count += n
    return float(math.exp(total / count))


# -- model transforms ------------------------------------------------------------


def _consumers(cfg: TransformerConfig, kind: str) -> tuple[str, ...]:
    if kind == "attn_in":
        return ("wq", "wk", "wv")
    return ("w_gate", "w_up") if cfg.activation == "swiglu" else ("w_up",)


def smooth_model(model: TransformerModel, stats: CalibrationStats, alpha: float = 0.8) -> TransformerModel:
    """Migrate activation scale into the projection weights of every tap.

    The divisor is stored per tap and applied to the activation on the
    projection path only, so the FP function is unchanged."""
    updates: dict[str, np.ndarray] = {}
    cfg = model.config
    for i in range(cfg.n_layers):
        for kind in ("attn_in", "mlp_in"):
            names = [f"layers.{i}.{w}" for w in _consumers(cfg, kind)]
            ws = [model[n].data for n in names]
            joined = np.concatenate(ws, axis=1)
            act = stats[f"L{i}.{kind}"].absmax
            old = model.get(f"layers.{i}.{kind}.smooth")
            if old is not None:
                raise ValueError("model is already smoothed")
            scaled, div = smooth_migrate(joined, act, alpha)
            splits = np.cumsum([w.shape[1] for w in ws])[:-1]
            for n, part in zip(names, np.split(scaled, splits, axis=1)):
                updates[n] = part
            updates[f"layers.{i}.{kind}.smooth"] = div
    out = model.with_params(updates)
    out.meta["smooth_alpha"] = alpha
    return out


def quantize_model_weights(model: TransformerModel, spec: QuantSpec) -> TransformerModel:
    """Fake-quantize every projection weight (embeddings and head stay FP)."""
    updates = {
        name: quantize_weight(p.data, spec)
        for name, p in model.params.items()
        if name.startswith("layers.") and name.rsplit(".", 1)[-1] in PROJECTIONS
    }
    out = model.with_params(updates)
    out.meta["weight_bits"] = spec.bits
    return out


# -- training -------------------------------------------------------------------


@dataclass
class TrainSettings:
    steps: int = 3000
    batch_size: int = 16
    seq_len: int = 160
    lr: float = 3e-3
    warmup: int = 50
    min_lr_frac: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    bos_prob: float = 0.5


def _train_batch(tokens: np.ndarray, settings: TrainSettings, rng: np.random.Generator) -> np.ndarray:
    n = settings.seq_len
    starts = rng.integers(0, len(tokens) - n + 1, size=settings.batch_size)
    batch = np.stack([tokens[s : s + n] for s in starts])
    with_bos = rng.random(settings.batch_size) < settings.bos_prob
    batch[with_bos, 0] = BOS
    return batch


def train_toy(
    config: TransformerConfig,
    corpus_tokens: np.ndarray,
    steps: int | None = None,
    seed: int = 0,
    settings: TrainSettings | None = None,
    on_step: Callable[[int, float, TransformerModel], None] | None = None,
) -> TransformerModel:
    """Train a base model from scratch and return it frozen.

    Training windows are random slices of ``corpus_tokens``; a fraction of
    them start with ``<bos>`` so that the token has a learned embedding."""
    settings = settings or TrainSettings()
    if steps is not None:
        settings = replace(settings, steps=steps)
    corpus_tokens = np.asarray(corpus_tokens, dtype=np.int64)
    if corpus_tokens.size == 0:
        raise ValueError("training corpus is empty")
    if settings.seq_len > config.max_seq_len or len(corpus_tokens) < settings.seq_len:
        raise ValueError("training window does not fit the corpus or the model context")
    model = init_params(config, seed)
    params = model.parameters()
    for p in params:
        p.requires_grad = True
    # decoupled decay on projection matrices only
    decay = [name.startswith("layers.") and p.ndim == 2 for name, p in model.params.items()]
    opt = Adam(params, lr=settings.lr, weight_decay=settings.weight_decay, decay=decay)
    rng = np.random.default_rng([seed, 1])
    losses: list[float] = []
    for step in range(settings.steps):
        batch = _train_batch(corpus_tokens, settings, rng)
        loss, _ = next_token_loss(model, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            last = losses[-1] if losses else float("nan")
            raise NumericalError(f"training diverged at step {step} (last finite loss {last:.4f})")
        T.zero_grad(params)
        T.backward(loss)
        opt.clip_grad_norm(settings.grad_clip)
        opt.step(cosine_lr(step, settings.steps, settings.lr, settings.warmup, settings.min_lr_frac))
        losses.append(value)
        if on_step is not None:
            on_step(step, value, model)
    model.freeze()
    model.meta.update(train_steps=settings.steps, train_seed=seed, train_losses=losses,
                      final_loss=float(np.mean(losses[-max(1, len(losses) // 20):])) if losses else None)
    return model


def unigram_entropy(tokens: np.ndarray, vocab_size: int = VOCAB_SIZE) -> float:
    counts = np.bincount(np.asarray(tokens).reshape(-1), minlength=vocab_size).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def greedy_generate(model: TransformerModel, prompt: Any, n_new: int,
                    prefix: KVBlock | None = None) -> list[int]:
    """Argmax continuation, for sanity demos only."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prefix is not None and prefix.length:
        pk, pv = prefix.numpy_blocks()
        cache = KVCache([Tensor(k[None] if k.ndim == 3 else k) for k in pk],
                        [Tensor(v[None] if v.ndim == 3 else v) for v in pv])
    else:
        cache = KVCache.empty(model)
    logits, cache = decode_step(model, cache, prompt)
    out: list[int] = []
    for _ in range(n_new):
        if cache.length >= model.config.max_seq_len:
            break
        assert logits is not None
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        logits, cache = decode_step(model, cache, [nxt])
    return out
