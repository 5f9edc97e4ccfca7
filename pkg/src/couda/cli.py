"""couda command line: generate, train, evaluate, ablate, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import gradcheck
from .config import ConfigError, ExperimentConfig
from .data import Benchmark, DataError, load_csv, make_benchmark, write_csv
from .losses import LossError
from .metrics import MetricsError, evaluate
from .model import ModelError, load_checkpoint, save_checkpoint
from .training import HISTORY_FIELDS, VARIANTS, NonFiniteLoss, fit

log = logging.getLogger("couda")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, DataError, LossError, ModelError, MetricsError)


# ---------------------------------------------------------------- artifacts

def write_history(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_FIELDS} for r in rows]


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_data(cfg: ExperimentConfig, seed: int) -> Benchmark:
    if cfg.csv is None:
        return make_benchmark(cfg.data, seed)
    K = cfg.model.n_classes
    return Benchmark(load_csv(cfg.csv["source"], K), load_csv(cfg.csv["target_train"], K),
                     load_csv(cfg.csv["target_test"], K), cfg.data, seed)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: ExperimentConfig) -> int:
    if cfg.csv is not None:
        raise ConfigError("generate needs a data section, not csv paths")
    out = _out_dir(cfg)
    bm = make_benchmark(cfg.data, cfg.seed)
    files = {"source": bm.source, "target_train": bm.target_train, "target_test": bm.target_test}
    try:
        for name, ds in files.items():
            write_csv(ds, out / f"{name}.csv")
        manifest = {
            "seed": cfg.seed,
            "n_classes": cfg.data.n_classes,
            "rows": {name: len(ds) for name, ds in files.items()},
            "class_counts": {name: np.bincount(ds.y_clean, minlength=cfg.data.n_classes).tolist()
                             for name, ds in files.items()},
            "spec": cfg.data.to_dict(),
        }
        _dump_json(manifest, out / "manifest.json")
    except OSError as e:
        raise ConfigError(f"cannot write to {out}: {e}") from e
    log.info("wrote %s", ", ".join(f"{k}={v}" for k, v in manifest["rows"].items()))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    bm = load_data(cfg, cfg.seed)
    t0 = time.perf_counter()
    try:
        model, history = fit(bm.source, bm.target_train, bm.target_test, cfg.train_config())
    except NonFiniteLoss as e:
        write_history(e.history, out / "history.csv")
        log.error("%s; partial history (%d epochs) saved", e, len(e.history))
        return EXIT_NUMERIC
    save_checkpoint(model, out / "checkpoint.bin")
    write_history(history, out / "history.csv")
    report = evaluate(model, bm.target_test)
    _dump_json(report.to_dict(), out / "metrics.json")
    _dump_json(cfg.to_dict(), out / "config.json")
    log.info("target macro-F1 %.4f  accuracy %.4f  (%.1fs)", report.macro_f1, report.accuracy,
             time.perf_counter() - t0)
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str) -> int:
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    bm = load_data(cfg, cfg.seed)
    report = evaluate(model, bm.target_test)
    out = _out_dir(cfg)
    _dump_json(report.to_dict(), out / "metrics.json")
    print(json.dumps({k: getattr(report, k) for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1")}))
    return EXIT_OK


def run_one(cfg: ExperimentConfig, variant: str, seed: int) -> dict:
    """One (variant, seed) cell of the sweep; failures become records, never exceptions."""
    try:
        bm = load_data(cfg, seed)
        model, _ = fit(bm.source, bm.target_train, bm.target_test, cfg.train_config(seed, variant))
        rep = evaluate(model, bm.target_test)
        return {"seed": seed, "accuracy": rep.accuracy, "macro_precision": rep.macro_precision,
                "macro_recall": rep.macro_recall, "macro_f1": rep.macro_f1, "noise_diag": rep.noise_diag}
    except Exception as e:  # recorded, sweep continues
        return {"seed": seed, "error": f"{type(e).__name__}: {e}"}


def _median(rows: list[dict], key: str) -> float | None:
    vals = [r[key] for r in rows if "error" not in r]
    return float(np.median(vals)) if vals else None


def summarize(cfg: ExperimentConfig, results: dict[str, list[dict]]) -> dict:
    variants = []
    for name in VARIANTS:
        rows = results[name]
        variants.append({
            "variant": name,
            "median": {k: _median(rows, k) for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1")},
            "failures": sum("error" in r for r in rows),
            "per_seed": rows,
        })
    return {"config": cfg.to_dict(), "seeds": list(cfg.seeds), "variants": variants}


def run_ablation(cfg: ExperimentConfig) -> dict:
    cells = [(v, s) for v in VARIANTS for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(run_one, [cfg] * len(cells), *zip(*cells)))
    else:
        rows = [run_one(cfg, v, s) for v, s in cells]
    results: dict[str, list[dict]] = {v: [] for v in VARIANTS}
    for (v, _), row in zip(cells, rows):
        results[v].append(row)
    return summarize(cfg, results)


def cmd_ablate(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    summary = run_ablation(cfg)
    _dump_json(summary, out / "ablation_summary.json")
    for v in summary["variants"]:
        f1 = v["median"]["macro_f1"]
        log.info("%-24s median macro-F1 %s", v["variant"], "n/a" if f1 is None else f"{f1:.4f}")
    log.info("ablation finished in %.1fs", time.perf_counter() - t0)
    return EXIT_OK


def cmd_gradcheck(seed: int = 0, instances: int = gradcheck.N_INSTANCES) -> int:
    t0 = time.perf_counter()
    failed = []
    for res in gradcheck.run_suite(seed, instances):
        status = "ok" if res.passed else "FAIL"
        print(f"{res.component:<10} max_rel_error={res.max_rel_error:.3e}  instances={res.instances}  {status}")
        if not res.passed or not math.isfinite(res.max_rel_error):
            failed.append(res.component)
    print(f"gradcheck {'passed' if not failed else 'failed: ' + ', '.join(failed)} "
          f"({time.perf_counter() - t0:.1f}s)")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. hp.alpha=0.5 or data.noise_rate=0")
    common.add_argument("--epochs", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--eta", type=float)
    common.add_argument("--lr", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="couda", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic benchmark CSVs")
    tr = sub.add_parser("train", parents=[common], help="train one model")
    tr.add_argument("--ablation", choices=list(VARIANTS))
    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the target test split")
    ev.add_argument("--checkpoint", required=True)
    ab = sub.add_parser("ablate", parents=[common], help="all ablation variants over several seeds")
    ab.add_argument("--seeds", help="comma separated seed list")
    ab.add_argument("--workers", type=int)
    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=gradcheck.N_INSTANCES)
    return p


def _overrides(args) -> list[str]:
    sets = list(args.overrides)
    for flag, key in (("seed", "seed"), ("out", "out"), ("epochs", "hp.epochs"), ("alpha", "hp.alpha"),
                      ("eta", "hp.eta"), ("lr", "hp.lr"), ("ablation", "ablation"), ("workers", "workers")):
        v = getattr(args, flag, None)
        if v is not None:
            sets.append(f"{key}={json.dumps(v)}")
    if getattr(args, "seeds", None):
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError as e:
            raise ConfigError(f"--seeds: {e}") from e
        sets.append(f"seeds={json.dumps(seeds)}")
    return sets


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.seed, args.instances)
    try:
        cfg = cfgmod.load(args.config, _overrides(args))
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        return cmd_ablate(cfg)
    except CONFIG_ERRORS as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
