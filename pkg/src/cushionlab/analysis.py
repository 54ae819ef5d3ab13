"""Outlier order statistics, attention-sink measurements, the component
ablation and search/tuning cost summaries."""

from __future__ import annotations

import logging
import math
import os
import platform
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .data import Corpus
from .model import KVBlock, PrefixCache, TransformerModel, forward, prefix_or_none
from .pipeline import QuantSetup, evaluate
from .search import SearchTrace
from .tuning import TuneConfig, TuneLog, tune

log = logging.getLogger(__name__)


# -- outlier statistics -----------------------------------------------------------


@dataclass
class LayerOutliers:
    layer: int
    top1: float
    top2: float
    top3: float
    p90: float
    median: float


@dataclass
class OutlierReport:
    layers: list[LayerOutliers]
    samples: int
    seq_len: int
    provenance: str
    tap: str

    def check_order(self) -> bool:
        return all(r.top1 >= r.top2 >= r.top3 >= r.p90 >= r.median >= 0 for r in self.layers)

    def to_json(self) -> dict[str, Any]:
        return {"schema_version": 1, "kind": "outlier-report", "samples": self.samples,
                "seq_len": self.seq_len, "provenance": self.provenance, "tap": self.tap,
                "layers": [asdict(r) for r in self.layers]}

    def to_csv(self) -> str:
        rows = ["layer,top1,top2,top3,p90,median"]
        rows += [f"{r.layer},{r.top1:.6g},{r.top2:.6g},{r.top3:.6g},{r.p90:.6g},{r.median:.6g}" for r in self.layers]
        return "\n".join(rows) + "\n"


def order_stats(values: np.ndarray) -> tuple[float, float, float, float, float]:
    """top-1/2/3, nearest-rank 90th percentile and median of ``|values|``."""
    a = np.sort(np.abs(np.asarray(values, dtype=np.float64)).reshape(-1))
    n = a.size
    if n == 0:
        raise ValueError("no values to summarise")
    top = [a[-k] if n >= k else a[0] for k in (1, 2, 3)]
    p90 = a[max(0, math.ceil(0.9 * n) - 1)]
    return float(top[0]), float(top[1]), float(top[2]), float(p90), float(np.median(a))


def _select_layers(n_layers: int, layers: str | Sequence[int]) -> list[int]:
    if layers == "last":
        return [n_layers - 1]
    if layers == "all":
        return list(range(n_layers))
    return [int(i) for i in layers]  # type: ignore[union-attr]


def outlier_stats(
    model: TransformerModel,
    texts: Sequence[np.ndarray],
    prefix: KVBlock | None = None,
    layers: str | Sequence[int] = "last",
    tap: str = "attn_in",
) -> OutlierReport:
    """Per-layer order statistics of tapped activation magnitudes at content
    positions, averaged over ``texts``."""
    if len(texts) == 0:
        raise ValueError("outlier_stats needs at least one text")
    chosen = _select_layers(model.config.n_layers, layers)
    acc = {i: np.zeros(5) for i in chosen}
    for text in texts:
        _, taps = forward(model, np.asarray(text)[None], prefix=prefix_or_none(prefix))
        for i in chosen:
            act = taps.acts[f"L{i}.{tap}"].data[:, taps.content_start :, :]
            acc[i] += np.array(order_stats(act))
    rows = [LayerOutliers(i, *(acc[i] / len(texts)).tolist()) for i in chosen]
    provenance = prefix.provenance if isinstance(prefix, PrefixCache) and prefix.length else "none"
    return OutlierReport(rows, len(texts), int(len(texts[0])), provenance, tap)


# -- attention sinks ---------------------------------------------------------------


@dataclass
class SinkReport:
    prefix_mass: list[list[float]]
    first_content_mass: list[list[float]]
    entropy: list[list[float]]
    prefix_len: int
    seq_len: int
    uniform_baseline: float
    mean_map: list[list[list[float]]] = field(default_factory=list)

    @property
    def mean_prefix_mass(self) -> float:
        return float(np.mean(self.prefix_mass))

    def to_json(self, with_maps: bool = False) -> dict[str, Any]:
        out = {"schema_version": 1, "kind": "sink-report", "prefix_len": self.prefix_len,
               "seq_len": self.seq_len, "uniform_baseline": self.uniform_baseline,
               "mean_prefix_mass": self.mean_prefix_mass, "prefix_mass": self.prefix_mass,
               "first_content_mass": self.first_content_mass, "entropy": self.entropy}
        if with_maps:
            out["mean_map"] = self.mean_map
        return out

    def to_csv(self) -> str:
        rows = ["layer,head,prefix_mass,first_content_mass,entropy"]
        for li, (pm, fm, en) in enumerate(zip(self.prefix_mass, self.first_content_mass, self.entropy)):
            for h in range(len(pm)):
                rows.append(f"{li},{h},{pm[h]:.6g},{fm[h]:.6g},{en[h]:.6g}")
        return "\n".join(rows) + "\n"


def uniform_prefix_mass(m: int, n: int) -> float:
    """Expected prefix mass if every content query spread its attention
    evenly over the prefix plus its causal past."""
    if m == 0:
        return 0.0
    return float(np.mean([m / (m + i + 1) for i in range(n)]))


def attention_masses(att: np.ndarray, prefix_cols: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-head prefix mass, mass on the first content column and entropy of
    the head's average attention row, from ``[B, H, T, S]`` weights."""
    prefix_mass = att[..., :prefix_cols].sum(axis=-1).mean(axis=(0, 2))
    first = att[..., prefix_cols].mean(axis=(0, 2))
    avg = att.mean(axis=(0, 2))
    avg = avg / avg.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(avg > 0, avg * np.log(avg), 0.0).sum(axis=-1)
    return prefix_mass, first, ent


def sink_report(model: TransformerModel, text: np.ndarray, prefix: KVBlock | None = None) -> SinkReport:
    text = np.asarray(text, dtype=np.int64).reshape(-1)
    _, taps = forward(model, text[None], prefix=prefix_or_none(prefix), capture_attn=True)
    p = taps.prefix_columns()
    n = len(text) - taps.content_start
    pm, fm, en, maps = [], [], [], []
    for layer in sorted(taps.attn):
        att = taps.attn[layer][:, :, taps.content_start :, :]
        a, b, c = attention_masses(att, p)
        pm.append(a.tolist())
        fm.append(b.tolist())
        en.append(c.tolist())
        maps.append(att[0].mean(axis=0).tolist())
    return SinkReport(pm, fm, en, p, n, uniform_prefix_mass(p, n), maps)


# -- ablation --------------------------------------------------------------------

ARMS = ("no-prefix", "greedy-init", "tuned-lambda0", "tuned-qaware")


@dataclass
class AblationRow:
    arm: str
    lq: float
    ppl: float
    prefix_len: int


@dataclass
class AblationTable:
    rows: list[AblationRow]
    setup: str
    greedy_share: float | None = None
    warnings: list[str] = field(default_factory=list)

    def row(self, arm: str) -> AblationRow:
        return next(r for r in self.rows if r.arm == arm)

    def to_json(self) -> dict[str, Any]:
        return {"schema_version": 1, "kind": "ablation", "setup": self.setup,
                "greedy_share": self.greedy_share, "warnings": self.warnings,
                "rows": [asdict(r) for r in self.rows]}

    def to_csv(self) -> str:
        lines = ["arm,lq,ppl,prefix_len"] + [f"{r.arm},{r.lq:.6g},{r.ppl:.6g},{r.prefix_len}" for r in self.rows]
        return "\n".join(lines) + "\n"


def ablation_run(
    model: TransformerModel,
    corpus: Corpus,
    greedy: PrefixCache,
    tune_cfg: TuneConfig,
    setup: QuantSetup,
    tuned: PrefixCache | None = None,
    eval_kwargs: dict[str, Any] | None = None,
) -> AblationTable:
    """Evaluate the four cumulative arms on identical held-out data.

    ``tuned`` (the quantization-aware arm) is reused when supplied; the
    lambda=0 arm is always tuned here. Tuning-time calibration uses the
    greedy prefix, as in the main pipeline."""
    from .pipeline import prepare

    kw = eval_kwargs or {}
    deployed, stats = prepare(model, corpus, greedy, setup)
    prefixes: dict[str, PrefixCache | None] = {"no-prefix": None, "greedy-init": greedy}
    prefixes["tuned-lambda0"], _ = tune(deployed, corpus.train, greedy, replace(tune_cfg, lam=0.0), stats)
    if tuned is None:
        tuned, _ = tune(deployed, corpus.train, greedy, tune_cfg, stats)
    prefixes["tuned-qaware"] = tuned
    rows = []
    for arm in ARMS:
        res = evaluate(model, corpus, prefixes[arm], setup, **kw)
        rows.append(AblationRow(arm, res.lq, res.ppl, res.prefix_len))
    table = AblationTable(rows, setup.describe())
    lqs = [r.lq for r in rows]
    total = lqs[0] - lqs[-1]
    if total > 0:
        table.greedy_share = (lqs[0] - lqs[1]) / total
        if table.greedy_share <= 0.5:
            table.warnings.append(f"greedy-init accounts for only {table.greedy_share:.1%} of the L_q reduction")
    else:
        table.warnings.append("no net L_q reduction across arms")
    for a, b in zip(rows, rows[1:]):
        if b.lq > a.lq:
            table.warnings.append(f"held-out L_q rose from {a.arm} ({a.lq:.4g}) to {b.arm} ({b.lq:.4g})")
    for w in table.warnings:
        log.warning("ablation: %s", w)
    return table


# -- cost --------------------------------------------------------------------------


@dataclass
class CostReport:
    search_seconds: float | None
    tune_seconds: float | None
    search_steps: int
    tune_steps: int
    hardware: str
    partial: bool

    def to_json(self) -> dict[str, Any]:
        return {"schema_version": 1, "kind": "cost-report", **asdict(self)}


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, {os.cpu_count()} cores, numpy fp32"


def cost_report(traces: Sequence[SearchTrace] | SearchTrace | None, tune_log: TuneLog | None) -> CostReport:
    """Step-1 (search) and step-2 (tuning) wall-clock totals."""
    if isinstance(traces, SearchTrace):
        traces = [traces]
    traces = list(traces or [])
    partial = False
    search_s: float | None = None
    steps = sum(len(t.steps) for t in traces)
    if traces:
        times = [s.seconds for t in traces for s in t.steps]
        if any(x is None for x in times):
            partial = True
        search_s = float(sum(x for x in times if x is not None))
    else:
        partial = True
    tune_s: float | None = None
    tune_steps = 0
    if tune_log is not None and tune_log.steps:
        tune_s = float(tune_log.seconds)
        tune_steps = len(tune_log.steps)
    else:
        partial = True
    return CostReport(search_s, tune_s, steps, tune_steps, hardware_note(), partial)
