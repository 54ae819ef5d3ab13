from __future__ import annotations

import numpy as np
import pytest

from cushionlab import quant
from cushionlab.data import Corpus
from cushionlab.model import extract_prefix_cache, forward
from cushionlab.quant import CalibrationStats, QuantSpec, TapStats, calibrate
from cushionlab.tensor import backward
from cushionlab.tuning import FreezeViolation, TuneConfig, TuneLog, random_init_prefix, tune, tuning_loss

from .conftest import small_model, text_ids
from .gradcheck import numeric_grad, rel_err

STATIC = QuantSpec(range_mode="static")


def _narrow(stats: CalibrationStats, frac: float) -> CalibrationStats:
    """Shrink every calibrated range so that some activations clip."""
    out = CalibrationStats()
    for name, st in stats.taps.items():
        mid = (st.min + st.max) / 2
        half = (st.max - st.min) / 2 * frac
        out.taps[name] = TapStats(mid - half, mid + half, st.absmax)
    return out


def _fd_check(model, batch, prefix, cfg, stats) -> float:
    work = prefix.copy(requires_grad=True)
    grads = backward(tuning_loss(model, batch, work, cfg, stats).total)
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in work.parameters():
        idx = [tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(6)]
        num = numeric_grad(lambda: float(tuning_loss(model, batch, work, cfg, stats).total.data), t.data,
                           eps=1e-6, indices=idx)
        analytic = np.array([grads[t][i] for i in idx])
        worst = max(worst, rel_err(analytic, np.array([num[i] for i in idx])))
    return worst


@pytest.fixture
def f64_model():
    return small_model("llama-ish", seed=4).astype(np.float64).freeze()


def test_gradient_without_quantization(f64_model, rng):
    batch = text_ids(rng, 10, 2)
    prefix = extract_prefix_cache(f64_model, [256, 10, 65])
    cfg = TuneConfig(spec=None)
    assert _fd_check(f64_model, batch, prefix, cfg, None) < 1e-3


def test_gradient_with_straight_through(f64_model, rng, monkeypatch):
    batch = text_ids(rng, 10, 2)
    prefix = extract_prefix_cache(f64_model, [256, 10, 65])
    stats = _narrow(calibrate(f64_model, batch, prefix=prefix), 0.6)
    # the rounding itself has zero derivative almost everywhere; the
    # straight-through estimator is the exact gradient of the clamp-only map
    def codes_without_rounding(view, params, spec):
        raw = (view - params.zero) / params.scale
        inside = (raw >= spec.qmin) & (raw <= spec.qmax)
        return np.clip(raw, spec.qmin, spec.qmax), inside

    monkeypatch.setattr(quant, "_codes", codes_without_rounding)
    cfg = TuneConfig(lam=0.5, spec=STATIC)
    parts = tuning_loss(f64_model, batch, prefix, cfg, stats)
    assert parts.quant > 0
    assert _fd_check(f64_model, batch, prefix, cfg, stats) < 1e-2


def test_lq_gradient_reaches_prefix_when_clipping(f64_model, rng):
    batch = text_ids(rng, 10, 2)
    prefix = extract_prefix_cache(f64_model, [256, 10])
    stats = _narrow(calibrate(f64_model, batch, prefix=prefix), 0.5)
    pred_only = prefix.copy(requires_grad=True)
    g0 = backward(tuning_loss(f64_model, batch, pred_only, TuneConfig(lam=0.0, spec=STATIC), stats).total)
    both = prefix.copy(requires_grad=True)
    g1 = backward(tuning_loss(f64_model, batch, both, TuneConfig(lam=1.0, spec=STATIC), stats).total)
    diff = sum(np.abs(g1[b] - g0[a]).sum() for a, b in zip(pred_only.parameters(), both.parameters()))
    assert diff > 0


def test_lambda_zero_equals_prediction_loss(llama, rng):
    batch = text_ids(rng, 12, 2)
    prefix = extract_prefix_cache(llama, [256])
    parts = tuning_loss(llama, batch, prefix, TuneConfig(lam=0.0, spec=QuantSpec()))
    assert parts.quant == 0.0 and float(parts.total.data) == parts.pred


def test_loss_combines_terms(llama, rng):
    batch = text_ids(rng, 12, 2)
    prefix = extract_prefix_cache(llama, [256])
    parts = tuning_loss(llama, batch, prefix, TuneConfig(lam=0.25))
    assert float(parts.total.data) == pytest.approx(parts.pred + 0.25 * parts.quant, rel=1e-5)
    # taps of the quantized forward: later layers see quantized inputs
    _, taps = forward(llama, batch, prefix=prefix, quant=QuantSpec())
    ref = quant.conditional_quant_error(taps, QuantSpec(), per_sample=True).mean()
    assert parts.quant == pytest.approx(ref, rel=1e-4)


def _tiny_cfg(**kw) -> TuneConfig:
    return TuneConfig(**{"epochs": 1, "batch_size": 4, "seq_len": 16, "n_sequences": 8, "lr": 1e-2, **kw})


def test_tune_keeps_model_frozen_and_changes_prefix(llama):
    corpus = Corpus.load()
    prefix = extract_prefix_cache(llama, [256, 10])
    before = llama.checksum()
    tuned, log = tune(llama, corpus.train, prefix, _tiny_cfg())
    assert llama.checksum() == before
    assert tuned.provenance == "tuned" and log.status == "ok" and len(log.steps) == 2
    assert any(not np.array_equal(a.data, b.data) for a, b in zip(tuned.parameters(), prefix.parameters()))
    assert not any(p.requires_grad for p in tuned.parameters())


def test_tune_rejects_unfrozen_model():
    m = small_model()
    m["wq" if "wq" in m.params else "layers.0.wq"].requires_grad = True
    with pytest.raises(FreezeViolation):
        tune(m, Corpus.load().train, extract_prefix_cache(m, [256]), _tiny_cfg())


def test_tune_nan_returns_best(llama):
    prefix = extract_prefix_cache(llama, [256, 10])
    tuned, log = tune(llama, Corpus.load().train, prefix, _tiny_cfg(lr=float("nan")))
    assert log.status == "nan-abort" and "non-finite" in log.message
    np.testing.assert_array_equal(tuned.keys[0].data, prefix.keys[0].data)


def test_tune_is_deterministic(llama):
    corpus = Corpus.load()
    prefix = extract_prefix_cache(llama, [256, 10])
    a, _ = tune(llama, corpus.train, prefix, _tiny_cfg())
    b, _ = tune(llama, corpus.train, prefix, _tiny_cfg())
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))


@pytest.mark.parametrize("kw", [{"lam": -1.0}, {"epochs": 0}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TuneConfig(**kw)


def test_log_round_trip():
    log = TuneLog(steps=[{"step": 0, "epoch": 0, "loss": 1.5, "pred": 1.0, "quant": 50.0}], seconds=2.0,
                  best_step=0)
    back = TuneLog.from_json(log.to_json())
    assert back == log


def test_random_init_prefix_shapes(llama):
    p = random_init_prefix(llama, 3, seed=0)
    assert p.m == 3 and p.provenance == "random-init"
    assert all(k.shape == (3, 2, 16) for k in p.keys)
