"""Command line entry point: train, eval, experiment, stream, distributed."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments
from .accountant import total_epsilon
from .data import DatasetConfig
from .distributed import distributed_train, shard
from .model import Ensemble, metric_name, metrics
from .sgbdt import Hyperparameters, calibrate, train_sgbdt

_CHOICES = {"leaf_noise": ("dynamic", "static"), "conversion": ("default", "standard"),
            "init_scale": ("algorithm", "theorem")}


def add_hyperparameter_flags(p: argparse.ArgumentParser) -> None:
    """One flag per Hyperparameters field; unset flags keep the dataclass default."""
    g = p.add_argument_group("hyperparameters")
    for f in dataclasses.fields(Hyperparameters):
        flag = "--" + f.name.lower().replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None)
        elif f.name in _CHOICES:
            g.add_argument(flag, dest=f.name, choices=_CHOICES[f.name], default=None)
        else:
            kind = int if f.type in ("int", int) else float
            g.add_argument(flag, dest=f.name, type=kind, default=None)


def hyperparameters_from_args(args) -> Hyperparameters:
    given = {}
    if getattr(args, "params", None):
        given.update(json.loads(Path(args.params).read_text()))
    for f in dataclasses.fields(Hyperparameters):
        v = getattr(args, f.name, None)
        if v is not None:
            given[f.name] = v
    return Hyperparameters.from_dict(given)


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, default=experiments._json_default))


def cmd_train(args) -> int:
    D = DatasetConfig.load(args.data).load_dataset()
    h = hyperparameters_from_args(args)
    if args.epsilon is not None:
        h = calibrate(h, D.n, args.epsilon)
    res = train_sgbdt(D, h, seed=args.seed, init_score=not args.no_init_score)
    res.ensemble.save(args.out)
    man = {"hyperparameters": h.to_dict(), **res.manifest()}
    if args.manifest:
        _write_json(man, args.manifest)
    if args.ledger_csv:
        res.ledger.to_csv(args.ledger_csv)
    standard = total_epsilon(res.plan, res.rho_init, h.delta_trees, "standard")
    print(f"trained {len(res.ensemble.trees)} trees; epsilon={res.epsilon_total:.4f} "
          f"({h.conversion} conversion; standard conversion {standard:.4f}) "
          f"alpha={res.plan.alpha_hat} sigma2_leaf={res.plan.sigma2_leaf:.4g}")
    return 0


def cmd_eval(args) -> int:
    D = DatasetConfig.load(args.data).load_dataset()
    ens = Ensemble.load(args.model)
    scores = metrics(ens.predict(D.X), D.y, D.task)
    print(f"{metric_name(D.task)}={scores[metric_name(D.task)]:.6f} n={D.n}")
    return 0


def cmd_experiment(args) -> int:
    cfg = experiments.load_config(args.config)
    if args.repeats is not None:
        cfg["repeats"] = args.repeats
    if "search" in cfg:
        best, table = experiments.hyperparameter_search(cfg, progress=True, workers=args.workers)
        _write_json({"best": best, "table": table}, Path(args.out) / "search.json")
        print(json.dumps(best))
        return 0
    rows, manifest = experiments.run_experiment(cfg, progress=True, workers=args.workers)
    return _emit(rows, manifest, args.out)


def cmd_stream(args) -> int:
    cfg = experiments.load_config(args.config)
    if args.repeats is not None:
        cfg["repeats"] = args.repeats
    rows, manifest = experiments.run_stream_scenario(cfg, progress=True, workers=args.workers)
    return _emit(rows, manifest, args.out)


def _emit(rows, manifest, out) -> int:
    csv_path, man_path = experiments.write_results(rows, manifest, out)
    for r in rows:
        print(f"{r['learner']:<24} eps={r['epsilon']:.4g} {r['metric']}={r['mean']:.4f} "
              f"+- {r['std']:.4f}")
    print(f"wrote {csv_path} and {man_path}")
    return 0


def cmd_distributed(args) -> int:
    D = DatasetConfig.load(args.data).load_dataset()
    h = hyperparameters_from_args(args)
    shards = shard(D, args.parties, np.random.default_rng(args.seed))
    res = distributed_train(shards, h, args.seed, parallel=args.parallel)
    res.ensemble.save(args.out)
    if args.transcript:
        _write_json([list(e) for e in res.transcript], args.transcript)
    scores = metrics(res.ensemble.predict(D.X), D.y, D.task)
    print(f"parties={args.parties} rounds={len(res.ensemble.trees)} "
          f"epsilon={res.plan.epsilon_reported:.4f} "
          f"{metric_name(D.task)}={scores[metric_name(D.task)]:.4f} (on the union of shards)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpgbdt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one ensemble on a dataset")
    t.add_argument("--data", required=True, help="dataset config JSON")
    t.add_argument("--out", required=True, help="model JSON path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epsilon", type=float, default=None,
                   help="total budget incl. init score; lowers eps-trees to fit")
    t.add_argument("--params", default=None, help="JSON file of hyperparameters")
    t.add_argument("--no-init-score", action="store_true")
    t.add_argument("--manifest", default=None)
    t.add_argument("--ledger-csv", default=None)
    add_hyperparameter_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a saved model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.set_defaults(func=cmd_eval)

    for name, func, text in (("experiment", cmd_experiment, "cross-validated experiment grid"),
                             ("stream", cmd_stream, "late-batch scenario, filter on vs off")):
        x = sub.add_parser(name, help=text)
        x.add_argument("--config", required=True)
        x.add_argument("--out", default="results")
        x.add_argument("--workers", type=int, default=1)
        x.add_argument("--repeats", type=int, default=None, help="override the config")
        x.set_defaults(func=func)

    d = sub.add_parser("distributed", help="simulated k-party training")
    d.add_argument("--data", required=True)
    d.add_argument("--parties", type=int, default=2)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--transcript", default=None)
    d.add_argument("--parallel", action="store_true")
    d.add_argument("--params", default=None)
    add_hyperparameter_flags(d)
    d.set_defaults(func=cmd_distributed)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in
                        ("experiment", "stream") else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
