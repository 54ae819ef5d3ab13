"""Greedy, early-stopped search for prompt tokens whose cached keys/values
minimise the conditional activation quantization error."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .data import SPECIAL_TOKENS, VOCAB_SIZE, sample_sequence
from .model import PrefixCache, TransformerModel, _run, extract_prefix_cache, forward
from .quant import CalibrationStats, QuantSpec, conditional_quant_error
from .tensor import Tensor

DEFAULT_SEEDS = ("bos", "newline")


class SearchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    max_len: int = 16
    tau: float = 0.5
    seeds: tuple[str | int, ...] = DEFAULT_SEEDS
    batch_size: int = 64
    seed: int = 0
    seq_len: int = 128
    fixed_text: bool = False
    threads: int = 1
    spec: QuantSpec = field(default_factory=QuantSpec)

    def __post_init__(self) -> None:
        if self.max_len < 0:
            raise SearchConfigError(f"max_len must be >= 0, got {self.max_len}")
        if not self.tau > 0:
            raise SearchConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1:
            raise SearchConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class SearchStep:
    step: int
    text_index: int
    token: int
    lq_before: float
    lq_after: float
    accepted: bool
    seconds: float


@dataclass
class SearchTrace:
    steps: list[SearchStep] = field(default_factory=list)
    stop_reason: str = "max-length"
    prompt: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    tau: float = 0.5
    max_len: int = 16

    @property
    def accepted(self) -> list[SearchStep]:
        return [s for s in self.steps if s.accepted]

    @property
    def seconds(self) -> float:
        return float(sum(s.seconds for s in self.steps))

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": 1,
            "kind": "search-trace",
            "prompt": self.prompt,
            "seeds": self.seeds,
            "stop_reason": self.stop_reason,
            "tau": self.tau,
            "max_len": self.max_len,
            "steps": [asdict(s) for s in self.steps],
            "seconds": self.seconds,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> SearchTrace:
        return cls(
            steps=[SearchStep(**s) for s in data["steps"]],
            stop_reason=data["stop_reason"],
            prompt=list(data["prompt"]),
            seeds=list(data.get("seeds", [])),
            tau=data.get("tau", 0.5),
            max_len=data.get("max_len", 0),
        )


def seed_prompt(cfg: SearchConfig) -> list[int]:
    """Initial prompt: seed names (``bos``, ``newline``, ``space``) or raw ids."""
    out = []
    for s in cfg.seeds:
        if isinstance(s, str) and not s.isdigit():
            if s not in SPECIAL_TOKENS:
                raise SearchConfigError(f"unknown seed token name {s!r}")
            out.append(SPECIAL_TOKENS[s])
        else:
            tok = int(s)
            if not 0 <= tok < VOCAB_SIZE:
                raise SearchConfigError(f"seed token id {tok} out of range")
            out.append(tok)
    return out


def _scoring_spec(spec: QuantSpec) -> QuantSpec:
    # ranges always come from the scored text itself
    return replace(spec, range_mode="dynamic") if spec.is_static else spec


def prompt_error(model: TransformerModel, text: np.ndarray, prompt: list[int], spec: QuantSpec) -> float:
    """Conditional error of ``text`` behind the cached ``prompt`` (may be empty)."""
    prefix = extract_prefix_cache(model, prompt) if prompt else None
    _, taps = forward(model, np.asarray(text)[None], prefix=prefix)
    return float(conditional_quant_error(taps, _scoring_spec(spec)))


def _score_batch(model: TransformerModel, text: np.ndarray, base: PrefixCache | None,
                 cands: np.ndarray, spec: QuantSpec) -> np.ndarray:
    b = len(cands)
    run = _run(model, cands[:, None], base, None, None, 0, False)
    keys, values = [], []
    for i in range(model.config.n_layers):
        k, v = run.keys[i].data, run.values[i].data
        if base is not None:
            bk, bv = base.keys[i].data, base.values[i].data
            k = np.concatenate([np.broadcast_to(bk, (b, *bk.shape)), k], axis=1)
            v = np.concatenate([np.broadcast_to(bv, (b, *bv.shape)), v], axis=1)
        keys.append(Tensor(k))
        values.append(Tensor(v))
    prefix = PrefixCache(keys, values)
    batch = np.broadcast_to(np.asarray(text, dtype=np.int64), (b, len(text)))
    _, taps = forward(model, batch, prefix=prefix)
    return conditional_quant_error(taps, spec, per_sample=True)


def score_candidates(
    model: TransformerModel,
    text: np.ndarray,
    prompt: list[int],
    candidates: Any,
    spec: QuantSpec,
    batch_size: int = 64,
    threads: int = 1,
) -> np.ndarray:
    """``L_q(text | prompt + [c])`` for every candidate ``c``, evaluated in
    batches that share the prompt's cached keys/values."""
    cands = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if cands.size and (cands.min() < 0 or cands.max() >= model.config.vocab_size):
        raise ValueError("candidate ids must index the embedding table")
    spec = _scoring_spec(spec)
    base = extract_prefix_cache(model, prompt) if prompt else None
    chunks = [cands[i : i + batch_size] for i in range(0, len(cands), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _score_batch(model, text, base, c, spec), chunks))
    else:
        parts = [_score_batch(model, text, base, c, spec) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def score_candidates_literal(model: TransformerModel, text: np.ndarray, prompt: list[int],
                             candidates: Any, spec: QuantSpec) -> np.ndarray:
    """One literal ``prompt + [c] + text`` forward per candidate, with the
    prompt positions masked out of the error. Slow reference path."""
    spec = _scoring_spec(spec)
    out = []
    for c in np.asarray(candidates, dtype=np.int64).reshape(-1):
        seq = np.concatenate([np.asarray(prompt, dtype=np.int64), [c], np.asarray(text, dtype=np.int64)])
        _, taps = forward(model, seq, content_start=len(prompt) + 1)
        out.append(conditional_quant_error(taps, spec))
    return np.asarray(out, dtype=np.float64)


def greedy_search(
    model: TransformerModel,
    tokens: np.ndarray,
    cfg: SearchConfig,
    stats: CalibrationStats | None = None,
) -> tuple[list[int], SearchTrace]:
    """Grow a prompt one token at a time.

    Each step draws a fresh text window, picks the vocabulary entry that
    minimises the conditional error, and keeps it only if the error falls
    below ``tau`` times the error without it. Seeds count toward
    ``max_len``. ``stats`` is unused for scoring: ranges always come from the
    drawn text.
    """
    prompt = seed_prompt(cfg)
    trace = SearchTrace(seeds=list(prompt), tau=cfg.tau, max_len=cfg.max_len)
    vocab = np.arange(model.config.vocab_size)
    step = 0
    while len(prompt) < cfg.max_len:
        t0 = time.perf_counter()
        index = 0 if cfg.fixed_text else step
        text = sample_sequence(tokens, cfg.seq_len, cfg.seed, index)
        before = prompt_error(model, text, prompt, cfg.spec)
        scores = score_candidates(model, text, prompt, vocab, cfg.spec, cfg.batch_size, cfg.threads)
        best = int(np.argmin(scores))
        after = float(scores[best])
        accepted = after < cfg.tau * before
        trace.steps.append(SearchStep(step, index, best, before, after, accepted, time.perf_counter() - t0))
        if not accepted:
            trace.stop_reason = "threshold"
            break
        prompt.append(best)
        step += 1
    trace.prompt = list(prompt)
    return prompt, trace
