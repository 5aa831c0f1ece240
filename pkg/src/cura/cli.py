"""Command-line interface: ``cura {synth,train,eval,triage,grid,gradcheck}``.

Values come from ``--config`` (a JSON run config, or a grid config for
``grid``) and are overridden by flags. Errors print one JSON object to stderr
and exit nonzero: 2 for configuration problems, 1 for everything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import __version__, pipeline
from .config import ConfigError, ExperimentGrid, RunConfig, load_grid, load_run_config
from .dataset import DatasetError, SynthConfig
from .multihead import TrainingDivergence
from .neighbors import NeighborError

EXIT_CONFIG = 2
EXIT_FAILURE = 1


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--method", help="internal_baseline, cura, mc_dropout or deep_ensemble")
    p.add_argument("--lambda-ind", type=float, dest="lambda_ind")
    p.add_argument("--lambda-coh", type=float, dest="lambda_coh")
    p.add_argument("--k", type=int, help="neighbours per cohort (default: 100, or 200 from 100k training rows)")
    p.add_argument("--heads", type=int, help="number of classifier heads")
    p.add_argument("--folds", type=int, help="number of cross-validation folds")
    p.add_argument("--data", help="embedding CSV instead of the synthetic generator")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cura", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic embedding CSV")
    p.add_argument("--config", help="JSON run config; its synthetic section is used")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--n", type=int, dest="n_samples")
    p.add_argument("--dim", type=int)
    p.add_argument("--clusters", type=int, dest="n_clusters")
    p.add_argument("--rate", type=float, dest="target_positive_rate")
    p.add_argument("--ambiguity", type=float)

    for name, text in (
        ("train", "train every fold into a run directory"),
        ("eval", "evaluate a trained run directory"),
        ("triage", "triage curves over the combined test folds of a run"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p, "run directory")

    p = sub.add_parser("grid", help="run an ablation or sensitivity grid")
    _common(p, "grid output directory")
    p.add_argument("--methods", help="comma-separated methods axis")
    p.add_argument("--lambda-ind-axis", dest="lambda_ind_axis", help="comma-separated lambda_ind values")
    p.add_argument("--lambda-coh-axis", dest="lambda_coh_axis", help="comma-separated lambda_coh values")
    p.add_argument("--ablations", help="comma-separated subset of base_only,+ind,+coh,full")

    p = sub.add_parser("gradcheck", help="finite-difference and soft-label identity checks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-ind", type=float, dest="lambda_ind")
    p.add_argument("--lambda-coh", type=float, dest="lambda_coh")
    p.add_argument("--heads", type=int)
    p.add_argument("--batch", type=int, default=5, help="batch size, at most 5")
    return parser


def _run_config(args) -> RunConfig:
    base = load_run_config(args.config) if args.config else RunConfig()
    return base.with_overrides(
        seed=args.seed,
        method=getattr(args, "method", None),
        lambda_ind=args.lambda_ind,
        lambda_coh=args.lambda_coh,
        k=getattr(args, "k", None),
        heads=args.heads,
        folds=getattr(args, "folds", None),
        csv_path=getattr(args, "data", None),
        max_epochs=getattr(args, "max_epochs", None),
        warmup_epochs=getattr(args, "warmup_epochs", None),
    )


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip()) if text is not None else None


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip()) if text is not None else None


def cmd_synth(args) -> int:
    base = load_run_config(args.config).synthetic if args.config else SynthConfig()
    if base is None:
        raise ConfigError("config has no synthetic data section")
    overrides = {k: getattr(args, k) for k in ("n_samples", "dim", "n_clusters", "target_positive_rate", "ambiguity")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = replace(base, **overrides)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from None
    ds = pipeline.synth(cfg, args.out)
    print(f"wrote {args.out}: n={len(ds)} dim={ds.dim} positive_rate={ds.positive_rate:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    models = pipeline.train_run(cfg, args.out)
    print(f"trained {cfg.method.kind} on {len(models)} folds into {args.out}")
    return 0


def cmd_eval(args) -> int:
    _, agg = pipeline.eval_run(args.out)
    cfg = RunConfig.from_dict(pipeline.read_json(f"{args.out}/config.json"))
    print(pipeline._table(cfg.method.kind, agg), end="")
    return 0


def cmd_triage(args) -> int:
    rep = pipeline.triage_run(args.out)
    frr = ", ".join(f"tau={t:g}: {v:.4f}" for t, v in sorted(rep.frr.items()))
    print(f"{rep.method} over {rep.n} test samples; FRR {frr}")
    return 0


def cmd_grid(args) -> int:
    grid = load_grid(args.config) if args.config else ExperimentGrid()
    base = grid.base.with_overrides(
        seed=args.seed, lambda_ind=args.lambda_ind, lambda_coh=args.lambda_coh, k=args.k,
        heads=args.heads, folds=args.folds, csv_path=args.data, max_epochs=args.max_epochs,
        warmup_epochs=args.warmup_epochs,
    )
    axes = {
        "methods": _names(args.methods) or ((args.method,) if args.method else None),
        "lambda_ind": _floats(args.lambda_ind_axis),
        "lambda_coh": _floats(args.lambda_coh_axis),
        "ablations": _names(args.ablations),
    }
    grid = replace(grid, base=base, **{k: v for k, v in axes.items() if v is not None})
    rows = pipeline.run_grid(grid, args.out)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"grid: {len(grid.cells())} cells, {len(rows)} rows, {failed} failed rows -> {args.out}/grid.csv")
    return 0


def cmd_gradcheck(args) -> int:
    base = load_run_config(args.config) if args.config else RunConfig()
    cfg = base.with_overrides(seed=args.seed, lambda_ind=args.lambda_ind, lambda_coh=args.lambda_coh, heads=args.heads)
    res = pipeline.gradcheck(cfg, batch_size=args.batch)
    for name in ("configured", "ce_only"):
        r = res[name]
        print(f"gradient {name} (lambda_ind={r['lambda_ind']}, lambda_coh={r['lambda_coh']}): "
              f"max rel error {r['max_rel_error']:.3e} over {r['n_params']} params (tol {pipeline.GRADCHECK_TOL:g})")
    idn = res["identity"]
    print(f"soft-label identity: max residual {idn['max_residual']:.3e} over {idn['n_tuples']} tuples "
          f"(tol {pipeline.IDENTITY_TOL:g})")
    print("PASS" if res["passed"] else "FAIL")
    return 0 if res["passed"] else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "triage": cmd_triage,
    "grid": cmd_grid,
    "gradcheck": cmd_gradcheck,
}


def _fail(code: int, kind: str, exc: BaseException, **extra) -> int:
    print(json.dumps({"error": kind, "message": str(exc), **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, NeighborError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except TrainingDivergence as exc:
        return _fail(EXIT_FAILURE, "divergence", exc, epoch=exc.epoch, batch=exc.batch)
    except pipeline.RunError as exc:
        return _fail(EXIT_FAILURE, "run", exc)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_FAILURE, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
