"""Experiment specs, metrics persistence and reporting."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from .data import Dataset, gen_synthetic, load_mnist
from .flcore import STRATEGY_TAGS, ConfigError, DivergenceError, Federation, MetricsRow, RunConfig, run

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "GRADMA_DATA_ROOT"
DEFAULT_DATA_ROOT = "data/mnist"
DATASETS = ("synthetic", "mnist")

REQUIRED_KEYS = ("eta_l", "eta_g", "I", "S", "N", "T", "omega", "strategy", "dataset")

METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def _as_bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("1", "true", "yes", "on", "0", "false", "no", "off"):
        return v.lower() in ("1", "true", "yes", "on")
    if isinstance(v, int) and v in (0, 1):
        return bool(v)
    raise ValueError(f"not a boolean: {v!r}")


def _as_int(v):
    if isinstance(v, bool):
        raise ValueError(f"not an integer: {v!r}")
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


def _as_float(v):
    if isinstance(v, bool):
        raise ValueError(f"not a number: {v!r}")
    return float(v)


def _as_list(item):
    def conv(v):
        if isinstance(v, str):
            v = [s for s in (p.strip() for p in v.split(",")) if s]
        elif not isinstance(v, (list, tuple)):
            v = [v]
        return [item(x) for x in v]
    return conv


# flat key -> converter; RunConfig fields first
KEY_TYPES: dict[str, Any] = {
    "eta_l": _as_float, "eta_g": _as_float, "I": _as_int, "S": _as_int, "N": _as_int, "T": _as_int,
    "omega": _as_float, "strategy": _as_list(str), "beta1": _as_float, "beta2": _as_float, "m": _as_int,
    "mu": _as_float, "batch_size": _as_int, "seed": _as_int, "hidden_dims": _as_list(_as_int),
    "gradient_mode": str, "anchor_cap": _as_int, "local_qp": _as_bool, "qp_tol": _as_float,
    "gram_check_every": _as_int,
    "dataset": str, "seeds": _as_list(_as_int), "out": str, "eval_every": _as_int,
    "synthetic_classes": _as_int, "synthetic_dim": _as_int, "synthetic_per_class": _as_int,
    "synthetic_test_per_class": _as_int, "record_lemma1": _as_bool, "record_wall_time": _as_bool,
    "jobs": _as_int,
}
assert set(RunConfig.field_names()) <= set(KEY_TYPES)


@dataclass(frozen=True)
class ExperimentSpec:
    run: RunConfig
    dataset: str
    seeds: tuple[int, ...]
    strategies: tuple[str, ...]
    out: str = "runs"
    eval_every: int = 5
    synthetic_classes: int = 10
    synthetic_dim: int = 20
    synthetic_per_class: int = 300
    synthetic_test_per_class: int = 100
    record_lemma1: bool = False
    record_wall_time: bool = False
    jobs: int = 1

    def to_dict(self) -> dict:
        """Flat key/value form; ``parse_config`` of this dict gives the spec back."""
        out = asdict(self.run)
        out["hidden_dims"] = list(self.run.hidden_dims)
        out.pop("seed")
        out["strategy"] = list(self.strategies)
        out["seeds"] = list(self.seeds)
        for f in fields(self):
            if f.name not in ("run", "seeds", "strategies"):
                out[f.name] = getattr(self, f.name)
        return out

    def run_config(self, strategy: str, seed: int) -> RunConfig:
        return replace(self.run, strategy=strategy, seed=seed)


def parse_config(path=None, overrides: dict | None = None) -> ExperimentSpec:
    """Load a flat JSON config, apply overrides (None values ignored) and validate."""
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
    raw = dict(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
            if k == "seed":
                raw.pop("seeds", None)
    return spec_from_dict(raw)


def spec_from_dict(raw: dict) -> ExperimentSpec:
    for key in raw:
        if key not in KEY_TYPES:
            raise ConfigError(key, "unknown configuration key")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise ConfigError(key, "missing required key")
    vals = {}
    for key, v in raw.items():
        try:
            vals[key] = KEY_TYPES[key](v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"bad value {v!r} ({exc})") from None

    strategies = tuple(vals.pop("strategy"))
    if not strategies:
        raise ConfigError("strategy", "at least one strategy is required")
    for s in strategies:
        if s not in STRATEGY_TAGS:
            raise ConfigError("strategy", f"unknown strategy {s!r}; expected one of {', '.join(STRATEGY_TAGS)}")
    if "seeds" in vals:
        seeds = tuple(vals.pop("seeds"))
        vals.pop("seed", None)
    else:
        seeds = (vals.pop("seed", 0),)
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if vals.get("dataset") not in DATASETS:
        raise ConfigError("dataset", f"must be one of {DATASETS}")

    run_keys = set(RunConfig.field_names())
    run_vals = {k: vals.pop(k) for k in list(vals) if k in run_keys}
    cfg = RunConfig(strategy=strategies[0], seed=seeds[0], **run_vals)
    for s in strategies:
        for seed in seeds:
            replace(cfg, strategy=s, seed=seed).validate()
    spec = ExperimentSpec(run=cfg, seeds=seeds, strategies=strategies, **vals)
    if spec.eval_every < 1:
        raise ConfigError("eval_every", "must be >= 1")
    if spec.jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    return spec


def write_config(spec: ExperimentSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


# -- metrics CSV -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])


_INT_FIELDS = {"t", "uplink_bytes", "downlink_bytes", "qp_g_iterations"}


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            vals = {}
            for k in METRIC_FIELDS:
                s = rec[k]
                if s == "":
                    vals[k] = None
                elif k in _INT_FIELDS:
                    vals[k] = int(s)
                else:
                    vals[k] = float(s)
            rows.append(MetricsRow(**vals))
    return rows


def rounds_to_accuracy(rows: list[MetricsRow], target: float):
    """First round whose test accuracy reaches ``target``; None if never."""
    if not rows:
        raise ValueError("no metrics rows")
    for r in rows:
        if r.test_accuracy >= target:
            return r.t
    return None


def top_accuracy(rows: list[MetricsRow]) -> float:
    return max(r.test_accuracy for r in rows)


# -- running experiments --------------------------------------------------------

def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT))


@lru_cache(maxsize=2)
def _mnist(root: str) -> tuple[Dataset, Dataset]:
    return load_mnist(root, "train"), load_mnist(root, "test")


def synthetic_split(num_classes: int, dim: int, n_train: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Train/test sets drawn from one Gaussian mixture."""
    full = gen_synthetic(num_classes, dim, n_train + n_test, seed)
    per_class = n_train + n_test
    pos = np.arange(len(full)) % per_class
    tr, te = pos < n_train, pos >= n_train
    return (Dataset(full.features[tr], full.labels[tr], num_classes),
            Dataset(full.features[te], full.labels[te], num_classes))


def load_datasets(spec: ExperimentSpec, seed: int) -> tuple[Dataset, Dataset]:
    if spec.dataset == "mnist":
        return _mnist(str(data_root()))
    return synthetic_split(spec.synthetic_classes, spec.synthetic_dim, spec.synthetic_per_class,
                           spec.synthetic_test_per_class, seed)


def metrics_path(out, strategy: str, seed: int) -> Path:
    return Path(out) / f"{strategy}_seed{seed}.csv"


def run_single(spec: ExperimentSpec, strategy: str, seed: int) -> dict:
    cfg = spec.run_config(strategy, seed)
    train, test = load_datasets(spec, seed)
    fed = Federation.build(cfg, train, test)
    t0 = time.perf_counter()
    try:
        rows = run(cfg, fed, eval_every=spec.eval_every, record_lemma1=spec.record_lemma1,
                   record_wall_time=spec.record_wall_time)
    except DivergenceError as exc:
        logger.error("%s seed %d: %s", strategy, seed, exc)
        return {"strategy": strategy, "seed": seed, "ok": False, "error": str(exc)}
    path = metrics_path(spec.out, strategy, seed)
    write_metrics_csv(rows, path)
    elapsed = time.perf_counter() - t0
    top = top_accuracy(rows) if rows else float("nan")
    logger.info("%s seed %d: top accuracy %.4f (%.1fs) -> %s", strategy, seed, top, elapsed, path)
    return {"strategy": strategy, "seed": seed, "ok": True, "top_accuracy": top, "path": str(path)}


SUMMARY_FIELDS = ["strategy", "seeds", "failed_seeds", "top_accuracy_mean", "top_accuracy_std"]


def summarize(results: list[dict], spec: ExperimentSpec) -> list[dict]:
    out = []
    for s in spec.strategies:
        mine = [r for r in results if r["strategy"] == s]
        tops = np.array([r["top_accuracy"] for r in mine if r["ok"]])
        out.append({
            "strategy": s,
            "seeds": " ".join(str(r["seed"]) for r in mine if r["ok"]),
            "failed_seeds": " ".join(str(r["seed"]) for r in mine if not r["ok"]),
            "top_accuracy_mean": float(tops.mean()) if tops.size else None,
            "top_accuracy_std": float(tops.std()) if tops.size else None,
        })
    return out


def run_experiment(spec: ExperimentSpec) -> list[dict]:
    """Run every (strategy, seed) pair, write per-run CSVs and ``summary.csv``."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(spec, out / "config.json")
    jobs = [(s, seed) for s in spec.strategies for seed in spec.seeds]
    if spec.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(run_single, [spec] * len(jobs), *zip(*jobs)))
    else:
        results = [run_single(spec, s, seed) for s, seed in jobs]
    summary = summarize(results, spec)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return summary


def read_summary(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("top_accuracy_mean", "top_accuracy_std"):
            r[k] = float(r[k]) if r[k] else None
    return rows


def report(out, targets: list[float]) -> list[dict]:
    """Rounds-to-accuracy per metrics CSV under ``out``."""
    table = []
    for path in sorted(Path(out).glob("*_seed*.csv")):
        strategy, _, seed = path.stem.rpartition("_seed")
        rows = read_metrics_csv(path)
        entry = {"strategy": strategy, "seed": int(seed), "top_accuracy": top_accuracy(rows) if rows else None}
        for target in targets:
            entry[target] = rounds_to_accuracy(rows, target) if rows else None
        table.append(entry)
    return table
