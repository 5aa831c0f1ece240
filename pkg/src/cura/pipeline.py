"""End-to-end runs: data, folds, training, evaluation, triage curves, grids.

A run directory holds::

    config.json   resolved run config
    folds.json    fold assignment
    models/       fold{i}.json (config + fitted method)
    logs/         training logs, cohort statistics, timing
    reports/      per-fold and aggregate metrics
    curves/       per-fold and combined curve tables

Everything except ``logs/timing_*.json`` is a deterministic function of the
config.
"""
from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, dataset, metrics, multihead, neighbors
from .config import ConfigError, ExperimentGrid, RunConfig
from .objective import EPS, normalized_entropy, verify_soft_label_identity

log = logging.getLogger(__name__)

GRID_COLUMNS = ("method", "lambda_ind", "lambda_coh", "fold", "auroc", "auprc", "brier", "nll", "aurc", "status")
TRIAGE_CURVES = ("bins", "retained_auprc", "workload_safety", "frr")
GRADCHECK_TOL = 1e-4
IDENTITY_TOL = 1e-10
FD_STEP = 1e-5
KINK_MARGIN = 1e-3


class RunError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# atomic files


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling of ``path`` and move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        yield tmp
        tmp.replace(path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_json(path, obj, indent: int | None = 2) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=indent, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


class Timer:
    def __init__(self):
        self.phases = {}

    @contextlib.contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - start

    def write(self, path) -> None:
        write_json(path, {"seconds": {k: round(v, 6) for k, v in self.phases.items()}})


# ---------------------------------------------------------------------------
# data


def load_dataset(cfg: RunConfig) -> dataset.EmbeddingDataset:
    if cfg.csv_path is not None:
        return dataset.load_csv(cfg.csv_path)
    return dataset.generate_synthetic(cfg.synthetic)


def make_folds(cfg: RunConfig, ds) -> dataset.FoldSplit:
    return dataset.split_folds(ds, cfg.n_folds, cfg.val_fraction, cfg.seed)


def resolve_k(cfg: RunConfig, n_train: int) -> int:
    return cfg.k if cfg.k is not None else neighbors.default_k(n_train)


def fit_fold(cfg: RunConfig, ds, folds, i: int, timer: Timer | None = None):
    """Train fold ``i``; returns (FittedMethod, logs, CohortStats or None)."""
    timer = timer or Timer()
    train_idx, val_idx, _ = folds.fold(i)
    train_set, val_set = ds.subset(train_idx), ds.subset(val_idx)
    cohorts = None
    if cfg.method.kind == "cura" and cfg.objective.lambda_coh > 0:
        with timer.phase("neighbors"):
            idx = neighbors.build_index(train_set.embeddings, train_set.labels, resolve_k(cfg, len(train_set)))
            cohorts = neighbors.precompute_cohorts(idx, train_set, cfg.objective.lambda_coh)
    with timer.phase("train"):
        fitted, logs = baselines.fit(
            cfg.method, train_set, val_set, cfg.objective, cfg.train, cfg.head, cfg.n_heads, cohorts
        )
    return fitted, logs, cohorts


def score(fitted: baselines.FittedMethod, ds, index, fold: str) -> metrics.ScoredSet:
    sub = ds.subset(index)
    if fitted.input_dim != sub.dim:
        raise RunError(f"model expects dim {fitted.input_dim}, data has dim {sub.dim}")
    p, u = baselines.predict(fitted, sub.embeddings)
    return metrics.ScoredSet(p, u, sub.labels, fitted.kind, fold)


# ---------------------------------------------------------------------------
# commands


def synth(cfg: dataset.SynthConfig, path) -> dataset.EmbeddingDataset:
    ds = dataset.generate_synthetic(cfg)
    with atomic_path(path) as tmp:
        dataset.write_csv(ds, tmp)
    return ds


def train_run(cfg: RunConfig, out, ds=None) -> list:
    """Train every fold of ``cfg`` into run directory ``out``."""
    out = Path(out)
    timer = Timer()
    with timer.phase("load_data"):
        ds = ds if ds is not None else load_dataset(cfg)
        folds = make_folds(cfg, ds)
    config = cfg.to_dict()
    write_json(out / "config.json", config)
    write_json(out / "folds.json", folds.to_json())
    fitted_all = []
    for i in range(folds.n_folds):
        fitted, logs, cohorts = fit_fold(cfg, ds, folds, i, timer)
        write_json(out / "models" / f"fold{i}.json", {"config": config, "fold": i, "model": fitted.to_json()},
                   indent=None)
        for j, tlog in enumerate(logs):
            name = f"fold{i}.csv" if len(logs) == 1 else f"fold{i}_member{j}.csv"
            with atomic_path(out / "logs" / name) as tmp:
                tlog.write_csv(tmp)
        if cohorts is not None:
            with atomic_path(out / "logs" / f"fold{i}_cohorts.csv") as tmp:
                cohorts.write_csv(tmp)
        log.info("fold %d: best epoch %s", i, [tl.best_epoch for tl in logs])
        fitted_all.append(fitted)
    timer.write(out / "logs" / "timing_train.json")
    return fitted_all


def load_run(out):
    """(config, dataset, folds, fitted models) of a trained run directory."""
    out = Path(out)
    if not (out / "config.json").exists():
        raise RunError(f"{out} is not a run directory (config.json missing)")
    cfg = RunConfig.from_dict(read_json(out / "config.json"))
    ds = load_dataset(cfg)
    folds = dataset.load_folds(out / "folds.json", ds)
    models = []
    for i in range(folds.n_folds):
        path = out / "models" / f"fold{i}.json"
        if not path.exists():
            raise RunError(f"missing model for fold {i}: {path}")
        obj = read_json(path)
        if obj.get("fold") != i or obj.get("config") != cfg.to_dict():
            raise RunError(f"{path} was not trained for fold {i} of this run")
        models.append(baselines.FittedMethod.from_json(obj["model"]))
    extra = sorted(p.name for p in (out / "models").glob("fold*.json") if p.stem not in {f"fold{i}" for i in range(folds.n_folds)})
    if extra:
        raise RunError(f"model files do not match {folds.n_folds} folds: unexpected {', '.join(extra)}")
    return cfg, ds, folds, models


def _table(method: str, agg: dict) -> str:
    header = f"{'method':<20}" + "".join(f"{k.upper() if k != 'brier' else 'Brier':>20}" for k in metrics.SCALARS)
    cells = "".join(f"{agg[k]['mean']:.4f} ({agg[k]['sd']:.4f})".rjust(20) for k in metrics.SCALARS)
    return header + "\n" + f"{method:<20}" + cells + "\n"


def eval_run(out):
    """Per-fold EvalReports plus mean and population sd across folds."""
    out = Path(out)
    timer = Timer()
    with timer.phase("load"):
        cfg, ds, folds, models = load_run(out)
    config = cfg.to_dict()
    reports = []
    for i, fitted in enumerate(models):
        _, _, test_idx = folds.fold(i)
        with timer.phase("predict"):
            s = score(fitted, ds, test_idx, str(i))
        with timer.phase("metrics"):
            rep = metrics.evaluate(s)
        write_json(out / "reports" / f"fold{i}.json", {"config": config, "report": rep.to_json()})
        rep.write_curves(out / "curves" / f"fold{i}")
        reports.append(rep)
    agg = metrics.aggregate(reports)
    write_json(
        out / "reports" / "summary.json",
        {"config": config, "method": cfg.method.kind, "folds": [r.to_json() for r in reports], "aggregate": agg},
    )
    with atomic_path(out / "reports" / "summary.txt") as tmp:
        tmp.write_text(_table(cfg.method.kind, agg), encoding="utf-8")
    timer.write(out / "logs" / "timing_eval.json")
    return reports, agg


def combined_scores(out) -> metrics.ScoredSet:
    cfg, ds, folds, models = load_run(out)
    parts = [score(m, ds, folds.fold(i)[2], str(i)) for i, m in enumerate(models)]
    return metrics.ScoredSet.concat(parts, fold="combined")


def triage_run(out) -> metrics.EvalReport:
    """Triage curves over the union of all test folds."""
    out = Path(out)
    timer = Timer()
    with timer.phase("predict"):
        s = combined_scores(out)
    with timer.phase("metrics"):
        rep = metrics.evaluate(s)
    cfg = RunConfig.from_dict(read_json(out / "config.json"))
    for name in TRIAGE_CURVES:
        metrics.write_table(out / "curves" / "combined" / f"{name}.csv", metrics.CURVE_COLUMNS[name], rep.curves[name])
    write_json(out / "reports" / "triage.json", {"config": cfg.to_dict(), "report": rep.to_json()})
    timer.write(out / "logs" / "timing_triage.json")
    return rep


def _cell_config(base: RunConfig, method: str, li: float, lc: float) -> RunConfig:
    return replace(
        base,
        method=replace(base.method, kind=method),
        objective=replace(base.objective, lambda_ind=li, lambda_coh=lc),
    )


def _cell_name(method: str, li: float, lc: float) -> str:
    return f"{method}__ind{li!r}__coh{lc!r}"


def run_grid(grid: ExperimentGrid, out) -> list[dict]:
    """Run every cell; a failing cell is recorded and the rest still run."""
    out = Path(out)
    write_json(out / "grid_config.json", grid.to_dict())
    ds = None
    try:
        ds = load_dataset(grid.base)
    except Exception as exc:  # noqa: BLE001 - recorded per cell below
        load_error = f"error: {type(exc).__name__}: {exc}"
    rows = []
    for method, li, lc in grid.cells():
        cfg = _cell_config(grid.base, method, li, lc)
        cell_dir = out / "cells" / _cell_name(method, li, lc)
        try:
            if ds is None:
                raise RunError(load_error)
            train_run(cfg, cell_dir, ds)
            reports, _ = eval_run(cell_dir)
            for r in reports:
                rows.append({"method": method, "lambda_ind": li, "lambda_coh": lc, "fold": int(r.fold),
                             **r.scalars(), "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - failure isolation
            log.warning("grid cell %s failed: %s", cell_dir.name, exc)
            status = str(exc) if str(exc).startswith("error: ") else f"error: {type(exc).__name__}: {exc}"
            for i in range(grid.base.n_folds):
                rows.append({"method": method, "lambda_ind": li, "lambda_coh": lc, "fold": i, "status": status})
    metrics.write_table(out / "grid.csv", GRID_COLUMNS, rows)
    return rows


def gradcheck(cfg: RunConfig, batch_size: int = 5, n_identity: int = 10_000) -> dict:
    """Finite-difference gradient check plus the soft-label identity check."""
    if not 1 <= batch_size <= 5:
        raise ConfigError("gradcheck batch size must lie in [1, 5]")
    rng = np.random.default_rng([cfg.seed, 7])
    dim = cfg.synthetic.dim if cfg.synthetic is not None else 8
    clf = multihead.init_classifier(dim, cfg.n_heads, cfg.head)
    X = rng.normal(size=(batch_size, dim))
    # redraw rows whose hidden pre-activations sit within finite-difference reach of the ReLU kink
    for _ in range(1000):
        near = np.flatnonzero((np.abs(multihead.preactivations(clf, X)) < KINK_MARGIN).any(axis=(0, 2)))
        if near.size == 0:
            break
        X[near] = rng.normal(size=(near.size, dim))
    else:
        raise RunError("could not draw a gradcheck batch away from ReLU kinks")
    y = np.zeros(batch_size)
    y[::2] = 1.0
    q = rng.uniform(0.05, 0.95, size=batch_size)
    weights = multihead.balanced_class_weights(y.astype(np.int64)) if y.min() < y.max() else (1.0, 1.0)

    results = {}
    objectives = {
        "configured": replace(cfg.objective, class_weights=weights),
        "ce_only": replace(cfg.objective, class_weights=weights, lambda_ind=0.0, lambda_coh=0.0),
    }
    for name, obj in objectives.items():
        w = obj.lambda_coh * normalized_entropy(q)
        res = multihead.gradient_check(clf, X, y, q, w, obj, FD_STEP)
        results[name] = {"max_rel_error": res["max_rel_error"], "n_params": res["n_params"],
                         "lambda_ind": obj.lambda_ind, "lambda_coh": obj.lambda_coh}

    p = rng.uniform(EPS, 1.0 - EPS, size=n_identity)
    yi = rng.integers(0, 2, size=n_identity).astype(np.float64)
    qi = rng.uniform(0.0, 1.0, size=n_identity)
    wi = rng.uniform(0.0, 5.0, size=n_identity)
    residual = float(verify_soft_label_identity(p, yi, qi, wi).max())
    results["identity"] = {"max_residual": residual, "n_tuples": n_identity}
    results["passed"] = bool(
        all(results[k]["max_rel_error"] < GRADCHECK_TOL for k in objectives) and residual < IDENTITY_TOL
    )
    return results
