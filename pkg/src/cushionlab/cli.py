"""Command-line entry point: ``cushionlab <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import artifacts
from .analysis import ablation_run, cost_report, outlier_stats, sink_report
from .artifacts import ArtifactFormatError
from .config import ConfigError, RunConfig
from .data import CorpusError, sample_batch
from .model import NumericalError, PrefixCache, TransformerModel, extract_prefix_cache, train_toy, unigram_entropy
from .pipeline import FP_SETUP, QuantSetup, evaluate, prepare
from .quant import CalibrationMissingError, ContractError, QuantConfigError, calibrate
from .search import SearchConfigError, SearchTrace, greedy_search
from .tuning import FreezeViolation, TuneLog, tune

log = logging.getLogger("cushionlab")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG) -> None:
        super().__init__(message)
        self.code = code


def write_json(path: Path, payload: dict[str, Any], rows: list[dict[str, Any]] | None = None) -> None:
    """JSON report, plus a flat CSV of ``rows`` beside it when given."""
    payload = {"schema_version": SCHEMA_VERSION, **payload}
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if rows:
        with path.with_suffix(".csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactFormatError(f"cannot read JSON report {path}: {exc}") from exc


# -- setup -------------------------------------------------------------------------


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.override(key.strip(), value.strip())
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.out:
        cfg.run.out_dir = args.out
    return cfg


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.run.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _model(args: argparse.Namespace, out: Path) -> TransformerModel:
    path = Path(args.model) if getattr(args, "model", None) else out / "model.cclb"
    return artifacts.load_model(path)


def _prefix(args: argparse.Namespace) -> PrefixCache | None:
    return artifacts.load_prefix(args.prefix) if getattr(args, "prefix", None) else None


# -- commands ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    corpus = cfg.corpus()
    settings = cfg.train_settings()
    if args.steps is not None:
        settings = replace(settings, steps=args.steps)
    t0 = time.perf_counter()

    def progress(step: int, loss: float, _: TransformerModel) -> None:
        if step % 100 == 0 or step == settings.steps - 1:
            log.info("train step %d loss %.4f", step, loss)

    model = train_toy(cfg.model_config(), corpus.train, seed=cfg.run.seed, settings=settings, on_step=progress)
    artifacts.save_model(model, out / "model.cclb")
    losses = model.meta["train_losses"]
    report = {"kind": "train-log", "steps": settings.steps, "final_loss": model.meta["final_loss"],
              "unigram_entropy": unigram_entropy(corpus.train), "losses": losses,
              "seconds": time.perf_counter() - t0}
    write_json(out / "train_log.json", report, [{"step": i, "loss": v} for i, v in enumerate(losses)])
    return {"model": str(out / "model.cclb"), "final_loss": model.meta["final_loss"]}


def cmd_calibrate(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    model = _model(args, out)
    prefix = _prefix(args)
    deployed, _ = prepare(model, cfg.corpus(), prefix, replace(cfg.quant_setup(), act=None))
    setup = cfg.quant_setup()
    seqs = sample_batch(cfg.corpus().train, setup.calib_len, setup.calib_sequences, setup.calib_seed)
    stats = calibrate(deployed, seqs, setup.act, prefix=prefix)
    name = args.output or ("calib_prefix.cclb" if prefix is not None else "calib.cclb")
    artifacts.save_stats(stats, out / name, {"prefix": bool(prefix)})
    return {"stats": str(out / name), "taps": stats.names()}


def run_search(cfg: RunConfig, model: TransformerModel, out: Path) -> tuple[list[int], SearchTrace]:
    scfg = cfg.search_config()
    prompt, trace = greedy_search(model, cfg.corpus().train, scfg)
    prefix = extract_prefix_cache(model, prompt) if prompt else None
    if prefix is not None:
        artifacts.save_prefix(prefix, out / "prefix_greedy.cclb")
    payload = {k: v for k, v in trace.to_json().items() if k != "schema_version"}
    rows = [{k: v for k, v in row.items() if k != "seconds"} for row in payload["steps"]]
    write_json(out / "search_trace.json", payload, rows)
    return prompt, trace


def cmd_search(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    if args.tau is not None:
        cfg.search.tau = args.tau
    if args.max_len is not None:
        cfg.search.max_len = args.max_len
    if args.threads is not None:
        cfg.search.threads = args.threads
    model = _model(args, out)
    prompt, trace = run_search(cfg, model, out)
    return {"prompt": prompt, "stop_reason": trace.stop_reason, "accepted": len(trace.accepted)}


def run_tune(cfg: RunConfig, model: TransformerModel, greedy: PrefixCache, out: Path,
             lam: float | None = None, name: str = "prefix_tuned") -> tuple[PrefixCache, TuneLog]:
    corpus = cfg.corpus()
    deployed, stats = prepare(model, corpus, greedy, cfg.quant_setup())
    tcfg = cfg.tune_config() if lam is None else replace(cfg.tune_config(), lam=lam)
    tuned, tlog = tune(deployed, corpus.train, greedy, tcfg, stats)
    if tlog.status != "ok":
        log.warning("tuning: %s", tlog.message)
    artifacts.save_prefix(tuned, out / f"{name}.cclb", {"lam": tcfg.lam})
    write_json(out / "tune_log.json" if name == "prefix_tuned" else out / f"{name}_log.json",
               {k: v for k, v in tlog.to_json().items() if k != "schema_version"}, tlog.steps)
    if tlog.status != "ok":
        raise NumericalError(tlog.message)
    return tuned, tlog


def cmd_tune(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    model = _model(args, out)
    greedy = artifacts.load_prefix(args.prefix or out / "prefix_greedy.cclb")
    _, tlog = run_tune(cfg, model, greedy, out, lam=args.lam)
    losses = tlog.losses
    return {"prefix": str(out / "prefix_tuned.cclb"), "steps": len(losses),
            "first_loss": losses[0] if losses else None, "last_loss": losses[-1] if losses else None}


def eval_setups(cfg: RunConfig) -> dict[str, QuantSetup]:
    base = cfg.quant_setup()
    act = cfg.act_spec()
    return {
        "fp32": FP_SETUP,
        "per-tensor-static": replace(base, act=replace(act, granularity="per-tensor", range_mode="static")),
        "per-tensor-dynamic": replace(base, act=replace(act, granularity="per-tensor", range_mode="dynamic")),
        "per-token-dynamic": replace(base, act=replace(act, granularity="per-token", range_mode="dynamic")),
    }


def eval_rows(results: dict[str, dict[str, Any]]) -> list[dict[str, Any]]:
    return [{"prefix": prefix, "scheme": scheme, "setup": r["setup"], "ppl": r["ppl"], "lq": r["lq"],
             "prefix_len": r["prefix_len"]}
            for prefix, by_scheme in results.items() for scheme, r in by_scheme.items()]


def run_eval(cfg: RunConfig, model: TransformerModel, prefix: PrefixCache | None,
             setups: dict[str, QuantSetup] | None = None) -> dict[str, Any]:
    corpus = cfg.corpus()
    ev = cfg.eval
    rows = {}
    for name, setup in (setups or {"config": cfg.quant_setup()}).items():
        res = evaluate(model, corpus, prefix, setup, n_texts=ev.n_texts, seq_len=ev.seq_len, seed=cfg.run.seed + 2)
        rows[name] = res.to_json()
    return rows


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    model = _model(args, out)
    prefix = _prefix(args)
    setups = {"fp32": FP_SETUP} if args.fp else None
    if args.all_setups:
        setups = eval_setups(cfg)
    rows = run_eval(cfg, model, prefix, setups)
    payload = {"kind": "eval", "prefix": prefix.provenance if prefix else "none", "results": rows}
    write_json(out / (args.output or "eval.json"), payload, eval_rows({payload["prefix"]: rows}))
    return payload


def run_analyze(cfg: RunConfig, model: TransformerModel, prefix: PrefixCache | None, out: Path,
                trace: SearchTrace | None, tlog: TuneLog | None, greedy: PrefixCache | None,
                ablation: bool, plot: bool) -> dict[str, Any]:
    corpus = cfg.corpus()
    texts = list(sample_batch(corpus.heldout, cfg.eval.seq_len, 10, cfg.run.seed + 3))
    summary: dict[str, Any] = {}
    reports = {}
    for label, pf in (("before", None), ("after", prefix)):
        if label == "after" and pf is None:
            continue
        rep = outlier_stats(model, texts, pf, layers="all")
        if not rep.check_order():
            raise ContractError("outlier report violates the ordering invariant")
        reports[label] = rep
        write_json(out / f"outliers_{label}.json", rep.to_json())
        (out / f"outliers_{label}.csv").write_text(rep.to_csv(), encoding="utf-8")
    summary["outliers"] = {k: [r.top1 for r in v.layers] for k, v in reports.items()}
    sinks = {"before": sink_report(model, texts[0])}
    if prefix is not None:
        sinks["after"] = sink_report(model, texts[0], prefix)
    for label, rep in sinks.items():
        write_json(out / f"sink_{label}.json", rep.to_json())
        (out / f"sink_{label}.csv").write_text(rep.to_csv(), encoding="utf-8")
    summary["sink"] = {k: {"mean_prefix_mass": v.mean_prefix_mass, "uniform_baseline": v.uniform_baseline}
                       for k, v in sinks.items()}
    if trace is not None or tlog is not None:
        cost = cost_report(trace, tlog)
        write_json(out / "cost.json", cost.to_json(), [cost.to_json()])
        summary["cost"] = cost.to_json()
    if ablation:
        if greedy is None:
            raise CLIError("ablation needs the greedy-init prefix")
        table = ablation_run(model, corpus, greedy, cfg.tune_config(), cfg.quant_setup(), tuned=prefix,
                             eval_kwargs={"n_texts": cfg.eval.n_texts, "seq_len": cfg.eval.seq_len,
                                          "seed": cfg.run.seed + 2})
        write_json(out / "ablation.json", table.to_json())
        (out / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
        summary["ablation"] = table.to_json()
    if plot:
        from .plots import plot_attention, plot_outliers

        plot_outliers(reports, out / "outliers.svg")
        plot_attention(sinks, out / "attention.svg")
    return summary


def cmd_analyze(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    out = out_dir(cfg)
    model = _model(args, out)
    prefix = _prefix(args)
    trace = SearchTrace.from_json(read_json(args.trace)) if args.trace else None
    tlog = TuneLog.from_json(read_json(args.tune_log)) if args.tune_log else None
    greedy = artifacts.load_prefix(args.greedy) if args.greedy else None
    return run_analyze(cfg, model, prefix, out, trace, tlog, greedy, args.ablation, args.plot)


def cmd_demo(cfg: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """train -> search -> tune -> eval -> analyze in one output directory."""
    out = out_dir(cfg)
    cfg.save(out / "run.cfg")
    t0 = time.perf_counter()
    source = args.model or (None if args.train else artifacts.bundled_model_path())
    if source is not None:
        model = artifacts.load_model(source)
        artifacts.save_model(model, out / "model.cclb")
    else:
        cmd_train(cfg, argparse.Namespace(steps=args.steps))
        model = artifacts.load_model(out / "model.cclb")
    log.info("search")
    prompt, trace = run_search(cfg, model, out)
    if not prompt:
        raise CLIError("search produced an empty prompt; nothing to tune", EXIT_NUMERIC)
    greedy = extract_prefix_cache(model, prompt)
    log.info("tune")
    tuned, tlog = run_tune(cfg, model, greedy, out)
    log.info("eval")
    results = {"none": run_eval(cfg, model, None, eval_setups(cfg)),
               "greedy-init": run_eval(cfg, model, greedy, eval_setups(cfg)),
               "cushion": run_eval(cfg, model, tuned, eval_setups(cfg))}
    write_json(out / "eval.json", {"kind": "eval", "prompt": prompt, "results": results}, eval_rows(results))
    log.info("analyze")
    summary = run_analyze(cfg, model, tuned, out, trace, tlog, greedy, not args.no_ablation, True)
    st_none = results["none"]["per-tensor-static"]
    st_cc = results["cushion"]["per-tensor-static"]
    verdict = {
        "prompt": prompt,
        "ppl_static_none": st_none["ppl"],
        "ppl_static_cushion": st_cc["ppl"],
        "lq_static_none": st_none["lq"],
        "lq_static_cushion": st_cc["lq"],
        "lq_reduction": 1.0 - st_cc["lq"] / st_none["lq"] if st_none["lq"] else 0.0,
        "sink": summary["sink"],
        "seconds": time.perf_counter() - t0,
    }
    write_json(out / "demo_summary.json", {"kind": "demo-summary", **verdict},
               [{k: v for k, v in verdict.items() if k != "seconds" and not isinstance(v, (dict, list))}])
    return verdict


# -- parser ------------------------------------------------------------------------

COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], dict[str, Any]]] = {
    "train": cmd_train, "calibrate": cmd_calibrate, "search": cmd_search, "tune": cmd_tune,
    "eval": cmd_eval, "analyze": cmd_analyze, "demo": cmd_demo,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (key = value with [sections])")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--out", help="output directory (overrides run.out_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cushionlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the toy base model")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("calibrate", parents=[common], help="static activation ranges")
    p.add_argument("--model")
    p.add_argument("--prefix")
    p.add_argument("--output")

    p = sub.add_parser("search", parents=[common], help="greedy prefix search")
    p.add_argument("--model")
    p.add_argument("--tau", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("tune", parents=[common], help="quantization-aware prefix tuning")
    p.add_argument("--model")
    p.add_argument("--prefix")
    p.add_argument("--lam", type=float)

    p = sub.add_parser("eval", parents=[common], help="perplexity and quantization error")
    p.add_argument("--model")
    p.add_argument("--prefix")
    p.add_argument("--fp", action="store_true", help="evaluate unquantized only")
    p.add_argument("--all-setups", action="store_true", help="fp32 plus the three activation schemes")
    p.add_argument("--output")

    p = sub.add_parser("analyze", parents=[common], help="outlier, sink, cost and ablation reports")
    p.add_argument("--model")
    p.add_argument("--prefix")
    p.add_argument("--greedy")
    p.add_argument("--trace")
    p.add_argument("--tune-log")
    p.add_argument("--ablation", action="store_true")
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("demo", parents=[common], help="run the whole chain")
    p.add_argument("--model", help="checkpoint to start from (default: the bundled toy model)")
    p.add_argument("--train", action="store_true", help="train a fresh model from the config instead")
    p.add_argument("--steps", type=int, help="training steps when --train is given")
    p.add_argument("--no-ablation", action="store_true")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        return _fail(exc, exc.code)
    except ArtifactFormatError as exc:
        return _fail(exc, EXIT_ARTIFACT)
    except (NumericalError, FreezeViolation, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (ConfigError, QuantConfigError, SearchConfigError, CorpusError, CalibrationMissingError,
            ContractError, ValueError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_ARTIFACT)
    print(json.dumps(_jsonable(result), indent=2, sort_keys=True))
    return EXIT_OK


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
