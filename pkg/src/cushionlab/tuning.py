"""Quantization-aware tuning of a prefix cache against a frozen model."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .data import sample_batch
from .model import PrefixCache, TransformerModel, _run
from .optim import Adam
from .quant import CalibrationStats, QuantSpec, quant_error_terms
from .tensor import Tensor


class FreezeViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TuneConfig:
    lam: float = 0.01
    epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 8
    seq_len: int = 128
    n_sequences: int = 2048
    seed: int = 0
    spec: QuantSpec | None = field(default_factory=QuantSpec)

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class LossParts:
    total: Tensor
    pred: float
    quant: float


def tuning_loss(
    model: TransformerModel,
    batch: np.ndarray,
    prefix: PrefixCache,
    cfg: TuneConfig,
    stats: CalibrationStats | None = None,
) -> LossParts:
    """``L_pred + lam * L_q`` on one batch of content sequences.

    Tapped activations are fake-quantized in the forward pass (straight-through
    on rounding) and the error term uses the same constant scale/zero-point.
    ``L_q`` is summed over taps and positions and averaged over the batch.
    With ``cfg.spec = None`` both quantization and the error term are off.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None]
    prefix.check(model.config)
    run = _run(model, batch, prefix if prefix.length else None, cfg.spec, stats, 0, False)
    pred = T.cross_entropy(run.logits[:, :-1, :], batch[:, 1:])
    if cfg.spec is None or cfg.lam == 0:
        return LossParts(pred, float(pred.data), 0.0)
    lq = quant_error_terms(run.taps, cfg.spec, stats).mean()
    return LossParts(pred + lq * cfg.lam, float(pred.data), float(lq.data))


@dataclass
class TuneLog:
    steps: list[dict[str, float]] = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    seconds: float = 0.0
    best_step: int = -1

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_json(self) -> dict[str, Any]:
        return {"schema_version": 1, "kind": "tune-log", "status": self.status, "message": self.message,
                "best_step": self.best_step, "steps": self.steps, "seconds": self.seconds}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> TuneLog:
        return cls(list(data["steps"]), data.get("status", "ok"), data.get("message", ""),
                   float(data.get("seconds", 0.0)), int(data.get("best_step", -1)))


def tune(
    model: TransformerModel,
    tokens: np.ndarray,
    prefix: PrefixCache,
    cfg: TuneConfig,
    stats: CalibrationStats | None = None,
) -> tuple[PrefixCache, TuneLog]:
    """Adam on the prefix keys/values only; the model must come out
    bit-identical. A non-finite loss stops the run and returns the prefix
    from the best finite step."""
    t0 = time.perf_counter()
    checksum = model.checksum()
    if any(p.requires_grad for p in model.parameters()):
        raise FreezeViolation("model weights must be frozen before prefix tuning")
    work = prefix.copy(requires_grad=True, provenance="tuned")
    params = work.parameters()
    opt = Adam(params, lr=cfg.lr)
    log = TuneLog()
    data = sample_batch(tokens, cfg.seq_len, cfg.n_sequences, cfg.seed) if cfg.n_sequences else None
    rng = np.random.default_rng([cfg.seed, 7])
    best = (math.inf, work.copy(provenance="tuned"))
    step = 0
    for epoch in range(cfg.epochs):
        if data is None:
            break
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            parts = tuning_loss(model, batch, work, cfg, stats)
            value = float(parts.total.data)
            if not math.isfinite(value):
                log.status = "nan-abort"
                log.message = f"non-finite loss at step {step} (epoch {epoch}); returning best prefix"
                log.seconds = time.perf_counter() - t0
                return best[1], log
            if value < best[0]:
                best = (value, work.copy(provenance="tuned"))
                log.best_step = step
            T.zero_grad(params)
            T.backward(parts.total)
            opt.step()
            log.steps.append({"step": step, "epoch": epoch, "loss": value, "pred": parts.pred, "quant": parts.quant})
            step += 1
    if model.checksum() != checksum:
        raise FreezeViolation("model weights changed during prefix tuning")
    log.seconds = time.perf_counter() - t0
    return work.copy(provenance="tuned"), log


def random_init_prefix(
    model: TransformerModel, m: int, seed: int, reference: np.ndarray | None = None
) -> PrefixCache:
    """Gaussian prefix matched per layer and channel to the keys/values of a
    reference forward pass."""
    if m < 1:
        raise ValueError(f"prefix length must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    if reference is None:
        reference = rng.integers(32, 127, size=min(128, model.config.max_seq_len))
    run = _run(model, np.asarray(reference, dtype=np.int64).reshape(1, -1), None, None, None, 0, False)
    keys, values = [], []
    for k, v in zip(run.keys, run.values):
        for src, dst in ((k.data[0], keys), (v.data[0], values)):
            mu = src.mean(axis=0)
            sd = src.std(axis=0)
            dst.append(Tensor((mu + sd * rng.standard_normal((m, *mu.shape))).astype(model.dtype)))
    return PrefixCache(keys, values, provenance="random-init", tokens=None)
