"""Linear fake quantization, range calibration and the activation
quantization-error objective.

Conventions
-----------
* Asymmetric: ``s = (max - min) / (2**N - 1)``, ``z = min``, codes in
  ``[0, 2**N - 1]``.
* Symmetric: ``s = max|x| / (2**(N-1) - 1)``, ``z = 0``, codes in
  ``[-(2**(N-1) - 1), 2**(N-1) - 1]``.
* A degenerate range (``max == min``) falls back to ``s = 1``.
* Rounding is round-half-to-even (``numpy.rint``).

Activation taps are ``[batch, tokens, features]`` arrays; "per-tensor" means
one (scale, zero) pair per sample in the batch.
"""

from __future__ import annotations

import warnings
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .tensor import Tensor, straight_through

if TYPE_CHECKING:
    from .model import KVBlock, TapRecord, TransformerModel

GRANULARITIES = ("per-tensor", "per-token", "per-channel-group")
RANGE_MODES = ("dynamic", "static")
SMOOTH_EPS = 1e-8


class QuantConfigError(ValueError):
    pass


class CalibrationMissingError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


class EmptyTapsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    symmetric: bool = False
    granularity: str = "per-tensor"
    group_size: int = 128
    range_mode: str = "dynamic"

    def __post_init__(self) -> None:
        if self.bits < 2:
            raise QuantConfigError(f"bits must be >= 2, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise QuantConfigError(f"unknown granularity {self.granularity!r}")
        if self.range_mode not in RANGE_MODES:
            raise QuantConfigError(f"unknown range mode {self.range_mode!r}")
        if self.group_size < 1:
            raise QuantConfigError(f"group_size must be positive, got {self.group_size}")
        if self.range_mode == "static" and self.granularity != "per-tensor":
            raise QuantConfigError("static ranges are only defined for per-tensor granularity")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    @property
    def is_static(self) -> bool:
        return self.range_mode == "static"


@dataclass(frozen=True)
class QuantParams:
    """Scale and zero-point, shaped to broadcast against the unit view of the
    tensor they were resolved from."""

    scale: np.ndarray
    zero: np.ndarray


@dataclass
class TapStats:
    min: float
    max: float
    absmax: np.ndarray

    def update(self, x: np.ndarray) -> None:
        self.min = min(self.min, float(x.min()))
        self.max = max(self.max, float(x.max()))
        flat = np.abs(x.reshape(-1, x.shape[-1])).max(axis=0)
        self.absmax = np.maximum(self.absmax, flat)


@dataclass
class CalibrationStats:
    taps: dict[str, TapStats] = field(default_factory=dict)
    count: int = 0

    def observe(self, name: str, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            return
        if name not in self.taps:
            flat = np.abs(x.reshape(-1, x.shape[-1])).max(axis=0)
            self.taps[name] = TapStats(float(x.min()), float(x.max()), flat)
        else:
            self.taps[name].update(x)

    def __getitem__(self, name: str) -> TapStats:
        try:
            return self.taps[name]
        except KeyError:
            raise CalibrationMissingError(f"no calibration stats for tap {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self.taps

    def names(self) -> list[str]:
        return list(self.taps)


# -- parameter resolution -------------------------------------------------------


def _unit_view(x: np.ndarray, spec: QuantSpec, batch_dims: int) -> tuple[np.ndarray, tuple[int, ...]]:
    if spec.granularity == "per-tensor":
        return x, tuple(range(batch_dims, x.ndim))
    if spec.granularity == "per-token":
        return x, (x.ndim - 1,)
    channels = x.shape[-1]
    g = min(spec.group_size, channels)
    if channels % g:
        raise QuantConfigError(f"group size {g} does not divide channel dimension {channels}")
    return x.reshape(*x.shape[:-1], channels // g, g), (x.ndim,)


def params_from_range(lo: Any, hi: Any, spec: QuantSpec, dtype: Any = np.float32) -> QuantParams:
    lo = np.asarray(lo, dtype=dtype)
    hi = np.asarray(hi, dtype=dtype)
    if spec.symmetric:
        amax = np.maximum(np.abs(lo), np.abs(hi))
        scale = np.where(amax > 0, amax / dtype(spec.qmax), dtype(1.0))
        zero = np.zeros_like(scale)
    else:
        width = hi - lo
        scale = np.where(width > 0, width / dtype(spec.qmax), dtype(1.0))
        zero = lo
    return QuantParams(scale.astype(dtype), np.asarray(zero, dtype=dtype))


def resolve_params(
    x: np.ndarray,
    spec: QuantSpec,
    stats: TapStats | None = None,
    batch_dims: int = 0,
) -> QuantParams:
    """Scale/zero-point for ``x``: from its own range (dynamic) or from
    calibration ``stats`` (static)."""
    x = np.asarray(x)
    dtype = x.dtype.type if np.issubdtype(x.dtype, np.floating) else np.float32
    if spec.is_static:
        if stats is None:
            raise CalibrationMissingError("static range mode needs calibration stats")
        return params_from_range(stats.min, stats.max, spec, dtype)
    view, axes = _unit_view(x, spec, batch_dims)
    return params_from_range(
        view.min(axis=axes, keepdims=True), view.max(axis=axes, keepdims=True), spec, dtype
    )


def _codes(view: np.ndarray, params: QuantParams, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    raw = np.rint((view - params.zero) / params.scale)
    inside = (raw >= spec.qmin) & (raw <= spec.qmax)
    return np.clip(raw, spec.qmin, spec.qmax), inside


def fake_quant(x: np.ndarray, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    """``s * clamp(round((x - z) / s)) + z`` elementwise."""
    x = np.asarray(x)
    view, _ = _unit_view(x, spec, 0)
    codes, _ = _codes(view, params, spec)
    return (codes * params.scale + params.zero).astype(x.dtype, copy=False).reshape(x.shape)


def fake_quant_ste(x: Tensor, params: QuantParams, spec: QuantSpec) -> Tensor:
    """Differentiable fake quantization: straight-through inside the clamp
    range, zero gradient outside. ``params`` act as constants."""
    view, _ = _unit_view(x.data, spec, 0)
    codes, inside = _codes(view, params, spec)
    out = (codes * params.scale + params.zero).astype(x.dtype, copy=False).reshape(x.shape)
    return straight_through(x, lambda _: out, inside.reshape(x.shape))


def quantize_weight(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize a ``[d_in, d_out]`` weight; groups run along the input
    dimension of each output channel."""
    wt = np.ascontiguousarray(w.T)
    params = resolve_params(wt, replace(spec, range_mode="dynamic"),
                            batch_dims=0)
    return fake_quant(wt, params, spec).T.copy()


# -- quantization error ---------------------------------------------------------


def _tap_params(name: str, x: np.ndarray, spec: QuantSpec, stats: CalibrationStats | None) -> QuantParams:
    if spec.is_static:
        if stats is None:
            raise CalibrationMissingError("static range mode needs calibration stats")
        return resolve_params(x, spec, stats[name])
    return resolve_params(x, spec, batch_dims=1)


def tap_error(x: Tensor, params: QuantParams, spec: QuantSpec) -> Tensor:
    """Per-sample squared quantization error of a ``[B, T, d]`` activation."""
    diff = x - fake_quant_ste(x, params, spec)
    return (diff * diff).sum(axis=(1, 2))


def quant_error_terms(
    taps: TapRecord,
    spec: QuantSpec,
    stats: CalibrationStats | None = None,
    content_only: bool = True,
) -> Tensor | None:
    """Differentiable per-sample error summed over every tapped activation.

    With ``content_only`` the leading literal-prompt positions are excluded
    both from the sum and from the range computation."""
    start = taps.content_start if content_only else 0
    total: Tensor | None = None
    for name, act in taps.acts.items():
        x = act[:, start:, :] if start else act
        if x.shape[1] == 0:
            raise ContractError("tap record has no content positions")
        term = tap_error(x, _tap_params(name, x.data, spec, stats), spec)
        total = term if total is None else total + term
    return total


def quant_error(taps: TapRecord, spec: QuantSpec, stats: CalibrationStats | None = None,
                per_sample: bool = False) -> Any:
    """Sum of ``||X - q(X)||^2`` over all tapped activations and positions."""
    if not taps.acts:
        warnings.warn("quant_error called on an empty tap record", EmptyTapsWarning, stacklevel=2)
        return np.zeros(0) if per_sample else 0.0
    terms = quant_error_terms(taps, spec, stats, content_only=False)
    assert terms is not None
    return terms.data.astype(np.float64) if per_sample else float(terms.data.astype(np.float64).sum())


def conditional_quant_error(taps: TapRecord, spec: QuantSpec, stats: CalibrationStats | None = None,
                            per_sample: bool = False) -> Any:
    """Error over content positions only, with ranges taken from those
    positions alone. Positions covered by an injected cache never appear in
    the taps; literal prompt tokens are masked by ``taps.content_start``."""
    if not taps.acts:
        warnings.warn("conditional_quant_error called on an empty tap record", EmptyTapsWarning,
                      stacklevel=2)
        return np.zeros(0) if per_sample else 0.0
    terms = quant_error_terms(taps, spec, stats, content_only=True)
    assert terms is not None
    return terms.data.astype(np.float64) if per_sample else float(terms.data.astype(np.float64).sum())


# -- smoothing ------------------------------------------------------------------


def smooth_migrate(weight: np.ndarray, act_absmax: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Move activation magnitude into ``weight`` (``[d_in, d_out]``).

    Returns the scaled weight and the per-input-channel divisor, so that
    ``(x / div) @ scaled == x @ weight``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"migration strength must be in [0, 1], got {alpha}")
    weight = np.asarray(weight)
    act = np.asarray(act_absmax, dtype=np.float64)
    if act.shape != (weight.shape[0],):
        raise ContractError(f"act_absmax {act.shape} does not match weight rows {weight.shape[0]}")
    wmax = np.abs(weight).max(axis=1).astype(np.float64)
    ok = (act >= SMOOTH_EPS) & (wmax > 0)
    div = np.ones_like(act)
    div[ok] = act[ok] ** alpha / wmax[ok] ** (1.0 - alpha)
    div = div.astype(weight.dtype)
    return (weight * div[:, None]).astype(weight.dtype), div


# -- calibration ----------------------------------------------------------------


def calibrate(
    model: TransformerModel,
    sequences: Iterable[np.ndarray],
    spec: QuantSpec | None = None,
    prefix: KVBlock | None = None,
    batch_size: int = 8,
) -> CalibrationStats:
    """Running per-tap min/max (and per-channel |max|) over FP forward passes.

    Only content positions contribute; an injected ``prefix`` is part of the
    context but never of the statistics. ``spec`` is accepted for interface
    symmetry; the stats themselves are granularity-independent."""
    from .model import forward

    seqs = [np.asarray(s) for s in sequences]
    if not seqs:
        raise ContractError("calibration needs at least one sequence")
    stats = CalibrationStats()
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i : i + batch_size]
        lengths = {len(s) for s in chunk}
        groups = [chunk] if len(lengths) == 1 else [[s] for s in chunk]
        for group in groups:
            _, taps = forward(model, np.stack(group), prefix=prefix)
            for name, act in taps.acts.items():
                stats.observe(name, act.data)
        stats.count += len(chunk)
    return stats


def merge_stats(parts: Iterable[CalibrationStats]) -> CalibrationStats:
    out = CalibrationStats()
    for part in parts:
        for name, st in part.taps.items():
            if name not in out.taps:
                out.taps[name] = TapStats(st.min, st.max, st.absmax.copy())
            else:
                cur = out.taps[name]
                cur.min = min(cur.min, st.min)
                cur.max = max(cur.max, st.max)
                cur.absmax = np.maximum(cur.absmax, st.absmax)
        out.count += part.count
    return out


def stats_from_mapping(data: Mapping[str, tuple[float, float, np.ndarray]]) -> CalibrationStats:
    return CalibrationStats({k: TapStats(float(a), float(b), np.asarray(c)) for k, (a, b, c) in data.items()})
