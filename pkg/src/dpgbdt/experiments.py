"""Cross-validated experiment harness: learners, ablations, stream scenario,
hyperparameter search, results CSV and manifest."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
from sklearn.ensemble import GradientBoostingClassifier, GradientBoostingRegressor
from sklearn.model_selection import KFold

from .data import Dataset, DatasetConfig
from .dpboost import DPBoostParams, train_dpboost
from .model import metric_name, metrics
from .accountant import total_epsilon
from .sgbdt import Hyperparameters, calibrate, dp_init_score, init_prediction, make_streams, \
    train_sgbdt

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["learner", "dataset", "epsilon", "metric", "mean", "std", "seed", "config_hash"]
LEARNERS = ("sgbdt", "dpboost", "dpmean", "nonprivate")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    path = Path(path)
    cfg = json.loads(path.read_text())
    ds = cfg.get("dataset")
    if ds is None:
        raise ValueError("experiment config needs a 'dataset' entry")
    if not Path(ds).is_absolute():
        cfg["dataset"] = str((path.parent / ds).resolve())
    return cfg


def load_data(cfg: dict) -> tuple:
    dcfg = DatasetConfig.load(cfg["dataset"])
    if not dcfg.schema:
        raise ValueError("dataset config declares no features")
    return Path(cfg["dataset"]).stem, dcfg.load_dataset()


def cv_splits(n: int, folds: int, repeats: int, seed: int):
    """Yield (repeat, fold, train_idx, test_idx)."""
    for rep in range(repeats):
        kf = KFold(folds, shuffle=True, random_state=seed * 1000 + rep)
        for k, (tr, te) in enumerate(kf.split(np.zeros(n))):
            yield rep, k, tr, te


def params_for(spec: dict, eps: float) -> dict:
    params = dict(spec.get("params", {}))
    for key, over in spec.get("per_epsilon", {}).items():
        if abs(float(key) - eps) < 1e-12:
            params.update(over)
    return params


# --- learners ---------------------------------------------------------------

@dataclass
class FitResult:
    predictions: np.ndarray
    epsilon: float
    info: dict


def fit_sgbdt(train: Dataset, X_test, params: dict, eps: float, seed, late=None) -> FitResult:
    params = dict(params)
    init_score = params.pop("init_score", True)
    h = calibrate(Hyperparameters.from_dict(params), train.n, eps)
    res = train_sgbdt(train, h, seed=seed, late=late, init_score=init_score)
    replayed = res.ledger.replay()
    if not np.array_equal(replayed, res.ledger.spent):
        raise AssertionError("ledger replay disagrees with recorded spending")
    info = res.manifest()
    info["eps_trees"] = h.eps_trees
    info["ledger_replay_max"] = float(replayed.max())
    info["ledger_sound"] = bool(replayed.max() <= res.plan.rho_budget)
    info["epsilon_standard_conversion"] = total_epsilon(res.plan, res.rho_init, h.delta_trees,
                                                        "standard")
    return FitResult(res.ensemble.predict(X_test), res.epsilon_total, info)


def fit_dpboost(train: Dataset, X_test, params: dict, eps: float, seed, late=None) -> FitResult:
    p = DPBoostParams(eps=eps, **params)
    ens = train_dpboost(train, p, seed=seed)
    return FitResult(ens.predict(X_test), p.eps, {})


def fit_dpmean(train: Dataset, X_test, params: dict, eps: float, seed, late=None) -> FitResult:
    m_star = params.get("m_star", 1.0)
    mean = dp_init_score(train.y, m_star, eps, make_streams(seed)["init"])
    raw = init_prediction(train.task, mean)
    if train.task == "classification":
        pred = np.full(X_test.shape[0], 1.0 if raw >= 0 else 0.0)
    else:
        pred = np.full(X_test.shape[0], raw)
    return FitResult(pred, eps, {})


def fit_nonprivate(train: Dataset, X_test, params: dict, eps: float, seed, late=None) -> FitResult:
    cls = GradientBoostingClassifier if train.task == "classification" else GradientBoostingRegressor
    rs = int(np.random.SeedSequence(seed).generate_state(1)[0])
    model = cls(random_state=rs, **params).fit(train.X, train.y)
    return FitResult(model.predict(X_test).astype(float), float("inf"), {})


FITTERS: Dict[str, Callable] = {
    "sgbdt": fit_sgbdt,
    "dpboost": fit_dpboost,
    "dpmean": fit_dpmean,
    "nonprivate": fit_nonprivate,
}


# --- stream scenario --------------------------------------------------------

def late_batch(train: Dataset, mode: str = "skewed", fraction: float = 1.0,
               late_class: float = 1.0, rng=None) -> np.ndarray:
    """Indices (into ``train``) of points arriving after the regular rounds.

    ``skewed`` takes the top label quartile (regression) or one class
    (classification); ``iid`` takes a uniform random quarter.  ``fraction``
    thins the batch uniformly.
    """
    rng = rng or np.random.default_rng(0)
    if mode == "skewed":
        if train.task == "classification":
            idx = np.flatnonzero(train.y == late_class)
        else:
            idx = np.flatnonzero(train.y >= np.quantile(train.y, 0.75))
    elif mode == "iid":
        idx = np.sort(rng.permutation(train.n)[: train.n // 4])
    elif mode == "none":
        idx = np.zeros(0, dtype=np.int64)
    else:
        raise ValueError(f"unknown stream mode {mode!r}")
    if fraction < 1.0:
        idx = np.sort(rng.choice(idx, size=int(round(fraction * idx.size)), replace=False))
    return idx


# --- runner -----------------------------------------------------------------

def _summarise(scores: List[float]) -> tuple:
    a = np.asarray(scores, dtype=float)
    return float(a.mean()), float(a.std(ddof=0))


RUN_INFO_KEYS = ("plan", "epsilon_total", "epsilon_standard_conversion", "ledger",
                 "ledger_replay_max", "ledger_sound")


def _run_fold(D: Dataset, cell: dict, seed: int, split: tuple) -> tuple:
    """One (repeat, fold) evaluation; returns (score, reported epsilon, run info)."""
    rep, k, tr, te = split
    train = D.subset(tr)
    late = None
    if cell.get("stream"):
        s = cell["stream"]
        late = late_batch(train, s.get("mode", "skewed"), s.get("fraction", 1.0),
                          s.get("late_class", 1.0), np.random.default_rng([seed, rep, k, 17]))
    fit = FITTERS[cell["learner"]](train, D.X[te], cell["params"], cell["epsilon"],
                                   [seed, rep, k], late)
    score = metrics(fit.predictions, D.y[te], D.task)[metric_name(D.task)]
    info = None
    if fit.info:
        info = {"repeat": rep, "fold": k,
                **{key: fit.info[key] for key in RUN_INFO_KEYS if key in fit.info}}
    return score, fit.epsilon, info


def run_cells(D: Dataset, dataset: str, cells: List[dict], folds: int, repeats: int, seed: int,
              chash: str, progress: bool = False, workers: int = 1) -> tuple:
    """Evaluate each cell (learner label, fitter, params, eps, late options).

    Folds and repeats run in ``workers`` processes; every fold draws from
    streams seeded by (seed, repeat, fold), so results do not depend on it.
    """
    rows, manifest_cells = [], []
    metric = metric_name(D.task)
    splits = list(cv_splits(D.n, folds, repeats, seed))
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for cell in cells:
            t0 = time.time()
            job = partial(_run_fold, D, cell, seed)
            results = list(pool.map(job, splits) if pool else map(job, splits))
            scores = [r[0] for r in results]
            infos = [r[2] for r in results if r[2] is not None]
            mean, std = _summarise(scores)
            eps_val = float(max(r[1] for r in results))
            rows.append({"learner": cell["label"], "dataset": dataset, "epsilon": eps_val,
                         "metric": metric, "mean": mean, "std": std, "seed": seed,
                         "config_hash": chash})
            manifest_cells.append({"label": cell["label"], "learner": cell["learner"],
                                   "epsilon_requested": cell["epsilon"],
                                   "epsilon_reported": eps_val, "params": cell["params"],
                                   "stream": cell.get("stream"),
                                   "scores": [float(s) for s in scores], "runs": infos,
                                   "seconds": time.time() - t0})
            if progress:
                log.info("%s %s eps=%.3f %s=%.4f+-%.4f (%.0fs)", dataset, cell["label"],
                         eps_val, metric, mean, std, time.time() - t0)
    finally:
        if pool is not None:
            pool.shutdown()
    return rows, manifest_cells


def expand_cells(cfg: dict) -> List[dict]:
    if not cfg.get("learners"):
        raise ValueError("experiment config needs a non-empty 'learners' list")
    cells = []
    for spec in cfg["learners"]:
        learner = spec["learner"]
        if learner not in LEARNERS:
            raise ValueError(f"unknown learner {learner!r}")
        for eps in spec.get("epsilons", [float("inf")]):
            cells.append({"learner": learner, "label": spec.get("label", learner),
                          "epsilon": float(eps), "params": params_for(spec, float(eps)),
                          "stream": spec.get("stream")})
    return cells


def run_experiment(cfg: dict, progress: bool = False, workers: int = 1) -> tuple:
    """Returns (rows, manifest) for every learner x epsilon cell in ``cfg``."""
    dataset, D = load_data(cfg)
    chash = config_hash(cfg)
    folds, repeats, seed = cfg.get("folds", 5), cfg.get("repeats", 20), cfg.get("seed", 0)
    rows, cells = run_cells(D, dataset, expand_cells(cfg), folds, repeats, seed, chash, progress,
                            workers)
    manifest = {"config": cfg, "config_hash": chash, "dataset": dataset, "n": D.n,
                "folds": folds, "repeats": repeats, "seed": seed, "cells": cells}
    return rows, manifest


def run_stream_scenario(cfg: dict, progress: bool = False, workers: int = 1) -> tuple:
    """Train with a late-arriving batch, once with the filter and once without.

    ``cfg["stream"]`` sets the batch (mode, fraction, late_class); ``cfg["epsilons"]``
    and ``cfg["params"]`` configure the S-GBDT runs.
    """
    stream = cfg.get("stream", {"mode": "skewed"})
    learners = []
    for use_filter in (True, False):
        spec = {"learner": "sgbdt", "label": f"sgbdt-stream-filter-{'on' if use_filter else 'off'}",
                "epsilons": cfg["epsilons"], "stream": stream,
                "params": {**cfg["params"], "use_filter": use_filter},
                "per_epsilon": {k: {**v, "use_filter": use_filter}
                                for k, v in cfg.get("per_epsilon", {}).items()}}
        if not use_filter and "params_off" in cfg:
            spec["params"].update(cfg["params_off"])
        learners.append(spec)
    return run_experiment({**{k: v for k, v in cfg.items() if k not in ("params", "params_off")},
                           "learners": learners}, progress, workers)


def static_leaf_noise_mode(params: dict, flag: bool = True) -> dict:
    """S-GBDT parameters with static (flag) or dynamic leaf noise."""
    return {**params, "leaf_noise": "static" if flag else "dynamic"}


def hyperparameter_search(cfg: dict, progress: bool = False, workers: int = 1) -> tuple:
    """Random-order evaluation of a declared grid; returns (best params, table).

    ``cfg["search"]`` holds ``grid`` (name -> values), ``max_evals`` and
    ``seed``; ``learner``, ``epsilon`` and base ``params`` name the target.
    """
    search = cfg["search"]
    dataset, D = load_data(cfg)
    grid = search["grid"]
    points = [dict(zip(grid, vals)) for vals in itertools.product(*grid.values())]
    order = np.random.default_rng(search.get("seed", 0)).permutation(len(points))
    points = [points[i] for i in order[: search.get("max_evals", len(points))]]
    lower_is_better = D.task == "classification"
    table, best = [], None
    for point in points:
        params = {**cfg.get("params", {}), **point}
        cell = {"learner": cfg["learner"], "label": cfg["learner"], "epsilon": cfg["epsilon"],
                "params": params}
        try:
            rows, _ = run_cells(D, dataset, [cell], cfg.get("folds", 5),
                                search.get("repeats", 1), cfg.get("seed", 0), "search",
                                workers=workers)
        except ValueError as e:  # infeasible budget or invalid combination
            table.append({**point, "mean": None, "error": str(e)})
            continue
        score = rows[0]["mean"]
        table.append({**point, "mean": score, "std": rows[0]["std"]})
        if progress:
            log.info("search %s -> %.4f", point, score)
        better = best is None or (score < best[0] if lower_is_better else score > best[0])
        if better:
            best = (score, params)
    if best is None:
        raise ValueError("no feasible grid point")
    return best[1], table


def write_results(rows: List[dict], manifest: dict, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    man_path = out / "manifest.json"
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=1, default=_json_default)
    return csv_path, man_path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")
