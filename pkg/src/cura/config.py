"""Run and grid configuration: a JSON tree with command-line overrides.

The global ``seed`` drives data generation, fold assignment, head
initialisation and mini-batch order, so a run is fully described by its
resolved config.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .baselines import METHODS, MethodSpec
from .dataset import SynthConfig
from .multihead import HeadSpec, TrainConfig
from .objective import ObjectiveConfig

ABLATIONS = ("base_only", "+ind", "+coh", "full")


class ConfigError(ValueError):
    pass


def _build(cls, obj, where: str, drop=()):
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)} - set(drop)
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _public(obj, drop=()) -> dict:
    d = asdict(obj)
    for k in drop:
        d.pop(k, None)
    return d


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synthetic: SynthConfig | None = field(default_factory=SynthConfig)
    csv_path: str | None = None
    n_folds: int = 5
    val_fraction: float = 0.125
    method: MethodSpec = field(default_factory=MethodSpec)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadSpec = field(default_factory=HeadSpec)
    n_heads: int = 32
    k: int | None = None  # None: 200 if n_train >= 100k else 100

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("exactly one dataset source (synthetic or csv) is required")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be >= 1")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        # the global seed owns every seeded component
        if self.synthetic is not None and self.synthetic.seed != self.seed:
            object.__setattr__(self, "synthetic", replace(self.synthetic, seed=self.seed))
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.head.init_seed != self.seed:
            object.__setattr__(self, "head", replace(self.head, init_seed=self.seed))

    def to_dict(self) -> dict:
        data = {"csv": self.csv_path} if self.csv_path is not None else {"synthetic": _public(self.synthetic, ("seed",))}
        objective = _public(self.objective, ("class_weights",))
        return {
            "seed": self.seed,
            "data": data,
            "folds": {"n_folds": self.n_folds, "val_fraction": self.val_fraction},
            "method": {**_public(self.method), "base_seeds": list(self.method.base_seeds)},
            "objective": objective,
            "train": _public(self.train, ("seed",)),
            "head": _public(self.head, ("init_seed",)),
            "n_heads": self.n_heads,
            "neighbors": {"k": self.k},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be an object")
        top = {"seed", "data", "folds", "method", "objective", "train", "head", "n_heads", "neighbors"}
        unknown = sorted(set(obj) - top)
        if unknown:
            raise ConfigError(f"unknown key(s) in run config: {', '.join(unknown)}")
        seed = int(obj.get("seed", 0))
        data = obj.get("data", {"synthetic": {}})
        if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "csv"):
            raise ConfigError("data must hold exactly one of 'synthetic' or 'csv'")
        synthetic = csv_path = None
        if "csv" in data:
            csv_path = str(data["csv"])
        else:
            synthetic = _build(SynthConfig, {**(data["synthetic"] or {}), "seed": seed}, "data.synthetic")
        folds = obj.get("folds", {})
        unknown = sorted(set(folds) - {"n_folds", "val_fraction"})
        if unknown:
            raise ConfigError(f"unknown key(s) in folds: {', '.join(unknown)}")
        method = dict(obj.get("method", {}))
        if "base_seeds" in method:
            method["base_seeds"] = tuple(method["base_seeds"])
        neighbors = obj.get("neighbors", {})
        unknown = sorted(set(neighbors) - {"k"})
        if unknown:
            raise ConfigError(f"unknown key(s) in neighbors: {', '.join(unknown)}")
        try:
            return cls(
                seed=seed,
                synthetic=synthetic,
                csv_path=csv_path,
                n_folds=int(folds.get("n_folds", 5)),
                val_fraction=float(folds.get("val_fraction", 0.125)),
                method=_build(MethodSpec, method, "method"),
                objective=_build(ObjectiveConfig, obj.get("objective"), "objective", drop=("class_weights",)),
                train=_build(TrainConfig, {**obj.get("train", {}), "seed": seed}, "train"),
                head=_build(HeadSpec, {**obj.get("head", {}), "init_seed": seed}, "head"),
                n_heads=int(obj.get("n_heads", 32)),
                k=neighbors.get("k"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def with_overrides(
        self,
        seed=None,
        method=None,
        lambda_ind=None,
        lambda_coh=None,
        k=None,
        heads=None,
        folds=None,
        csv_path=None,
        max_epochs=None,
        warmup_epochs=None,
    ) -> "RunConfig":
        """Apply command-line flags; ``None`` leaves a value untouched."""
        cfg = self
        try:
            if method is not None:
                cfg = replace(cfg, method=replace(cfg.method, kind=method))
            obj = {}
            if lambda_ind is not None:
                obj["lambda_ind"] = float(lambda_ind)
            if lambda_coh is not None:
                obj["lambda_coh"] = float(lambda_coh)
            if obj:
                cfg = replace(cfg, objective=replace(cfg.objective, **obj))
            tr = {}
            if max_epochs is not None:
                tr["max_epochs"] = int(max_epochs)
            if warmup_epochs is not None:
                tr["warmup_epochs"] = int(warmup_epochs)
            elif max_epochs is not None and cfg.train.warmup_epochs >= int(max_epochs):
                # keep the default schedule proportional when only the budget shrinks
                tr["warmup_epochs"] = int(max_epochs) // 2
            if tr:
                cfg = replace(cfg, train=replace(cfg.train, **tr))
            if csv_path is not None:
                cfg = replace(cfg, csv_path=str(csv_path), synthetic=None)
            top = {}
            if seed is not None:
                top["seed"] = int(seed)
            if k is not None:
                top["k"] = int(k)
            if heads is not None:
                top["n_heads"] = int(heads)
            if folds is not None:
                top["n_folds"] = int(folds)
            if top:
                cfg = replace(cfg, **top)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg


@dataclass(frozen=True)
class ExperimentGrid:
    base: RunConfig = field(default_factory=RunConfig)
    methods: tuple = ("internal_baseline", "cura")
    lambda_ind: tuple = (0.5,)
    lambda_coh: tuple = (0.01,)
    ablations: tuple = ABLATIONS

    def __post_init__(self):
        for name in ("methods", "lambda_ind", "lambda_coh", "ablations"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"grid axis {name} must be non-empty")
            object.__setattr__(self, name, value)
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} in grid")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}; choose from {', '.join(ABLATIONS)}")
        if any(v < 0 for v in self.lambda_ind + self.lambda_coh):
            raise ConfigError("grid lambdas must be non-negative")

    def cells(self) -> list[tuple[str, float, float]]:
        """(method, lambda_ind, lambda_coh) per cell, duplicates removed.

        CURA contributes the ablation rows at the base lambdas followed by
        the lambda_ind x lambda_coh product; other methods run once.
        """
        li, lc = self.base.objective.lambda_ind, self.base.objective.lambda_coh
        ablation = {"base_only": (0.0, 0.0), "+ind": (li, 0.0), "+coh": (0.0, lc), "full": (li, lc)}
        out = []
        for m in self.methods:
            if m != "cura":
                cell = (m, 0.0, 0.0)
                if cell not in out:
                    out.append(cell)
                continue
            for a in self.ablations:
                cell = ("cura", *ablation[a])
                if cell not in out:
                    out.append(cell)
            for x in self.lambda_ind:
                for y in self.lambda_coh:
                    cell = ("cura", float(x), float(y))
                    if cell not in out:
                        out.append(cell)
        return out

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "methods": list(self.methods),
            "lambda_ind": list(self.lambda_ind),
            "lambda_coh": list(self.lambda_coh),
            "ablations": list(self.ablations),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentGrid":
        unknown = sorted(set(obj) - {"base", "methods", "lambda_ind", "lambda_coh", "ablations"})
        if unknown:
            raise ConfigError(f"unknown key(s) in grid config: {', '.join(unknown)}")
        base = RunConfig.from_dict(obj.get("base", {}))
        kw = {}
        for name in ("methods", "ablations"):
            if name in obj:
                kw[name] = tuple(obj[name])
        for name in ("lambda_ind", "lambda_coh"):
            if name in obj:
                kw[name] = tuple(float(v) for v in obj[name])
        return cls(base=base, **kw)


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(read_json(path))


def load_grid(path) -> ExperimentGrid:
    return ExperimentGrid.from_dict(read_json(path))
