"""Deployment-style evaluation: optional smoothing, weight fake-quantization,
static calibration with the prefix in place, then perplexity and activation
quantization error on held-out text."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Corpus, sample_batch
from .model import KVBlock, TransformerModel, forward, perplexity, prefix_or_none, quantize_model_weights, smooth_model
from .quant import CalibrationStats, QuantSpec, calibrate, conditional_quant_error


def default_act_spec() -> QuantSpec:
    return QuantSpec(bits=8, symmetric=False, granularity="per-tensor", range_mode="static")


def default_weight_spec() -> QuantSpec:
    return QuantSpec(bits=8, symmetric=True, granularity="per-channel-group", group_size=128)


@dataclass(frozen=True)
class QuantSetup:
    act: QuantSpec | None = field(default_factory=default_act_spec)
    weight: QuantSpec | None = field(default_factory=default_weight_spec)
    smooth_alpha: float | None = None
    calib_sequences: int = 32
    calib_len: int = 128
    calib_seed: int = 1

    def describe(self) -> str:
        if self.act is None:
            return "fp32"
        a = self.act
        parts = [f"W{self.weight.bits if self.weight else 32}A{a.bits}", a.granularity, a.range_mode]
        if self.smooth_alpha is not None:
            parts.append(f"smooth{self.smooth_alpha:g}")
        return "-".join(parts)


FP_SETUP = QuantSetup(act=None, weight=None)


def calibration_sequences(corpus: Corpus, setup: QuantSetup) -> np.ndarray:
    return sample_batch(corpus.train, setup.calib_len, setup.calib_sequences, setup.calib_seed)


def prepare(
    model: TransformerModel,
    corpus: Corpus,
    prefix: KVBlock | None,
    setup: QuantSetup,
) -> tuple[TransformerModel, CalibrationStats | None]:
    """Model and calibration stats as they would be deployed with ``prefix``."""
    prefix = prefix_or_none(prefix)
    seqs = None
    if setup.smooth_alpha is not None:
        seqs = calibration_sequences(corpus, setup)
        model = smooth_model(model, calibrate(model, seqs, prefix=prefix), setup.smooth_alpha)
    if setup.weight is not None:
        model = quantize_model_weights(model, setup.weight)
    stats = None
    if setup.act is not None and setup.act.is_static:
        seqs = calibration_sequences(corpus, setup) if seqs is None else seqs
        stats = calibrate(model, seqs, setup.act, prefix=prefix)
    return model, stats


@dataclass
class EvalResult:
    setup: str
    ppl: float
    lq: float
    lq_per_text: list[float]
    n_texts: int
    prefix_len: int

    def to_json(self) -> dict[str, Any]:
        return {"setup": self.setup, "ppl": self.ppl, "lq": self.lq, "lq_per_text": self.lq_per_text,
                "n_texts": self.n_texts, "prefix_len": self.prefix_len}


def heldout_texts(corpus: Corpus, n_texts: int, seq_len: int, seed: int) -> np.ndarray:
    return sample_batch(corpus.heldout, seq_len, n_texts, seed)


def heldout_lq(
    model: TransformerModel,
    texts: np.ndarray,
    prefix: KVBlock | None,
    spec: QuantSpec,
    stats: CalibrationStats | None,
) -> np.ndarray:
    """Conditional error per held-out text, measured on clean activations."""
    _, taps = forward(model, texts, prefix=prefix_or_none(prefix))
    return conditional_quant_error(taps, spec, stats, per_sample=True)


def evaluate(
    model: TransformerModel,
    corpus: Corpus,
    prefix: KVBlock | None,
    setup: QuantSetup,
    n_texts: int = 8,
    seq_len: int = 128,
    seed: int = 2,
    ppl_tokens: int | None = None,
) -> EvalResult:
    deployed, stats = prepare(model, corpus, prefix, setup)
    text = corpus.heldout if ppl_tokens is None else corpus.heldout[:ppl_tokens]
    ppl = perplexity(deployed, text, prefix_or_none(prefix), setup.act, stats, window=seq_len)
    m = prefix.length if prefix is not None else 0
    if setup.act is None:
        per = np.zeros(n_texts)
    else:
        per = heldout_lq(deployed, heldout_texts(corpus, n_texts, seq_len, seed), prefix, setup.act, stats)
    return EvalResult(setup.describe(), ppl, float(per.mean()), [float(x) for x in per], n_texts, m)
