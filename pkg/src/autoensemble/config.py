"""TOML run configuration with strict key checking.

Schema (every key optional except ``data.train``; relative paths resolve
against the config file's directory)::

    seed = 0                        # 64-bit unsigned
    output_dir = "runs/demo"

    [data]
    train = "train.csv"
    eval = "eval.csv"
    label_column = "label"

    [search]
    generator = "grow"              # grow | pool
    iterations = 3
    steps_per_iteration = 200
    batch_size = 64
    learning_rate = 0.1
    width = 8
    mlp_depth = 1                   # pool generator only
    num_stumps = 20
    activation = "tanh"             # tanh | relu
    ensembler = "complexity_regularized"   # or uniform
    strategies = ["grow"]           # grow, all
    selection_metric = "train_objective"   # or eval_loss
    checkpoint_every = 50
    probe_size = 32

    [objective]
    lambda = 0.01
    beta = 0.001
    surrogate = "exp"               # exp | logistic
    measure = "rademacher_proxy"    # or output_variance, jacobian_norm
    rho = 0.1
    max_prox_steps = 500
    tol = 1e-10

    [cluster]
    num_workers = 1
    strategy = "replication"        # or round_robin
    fault_plan = []                 # [[worker, step], [worker, step, "bookkeeping"], ...]
    watchdog_seconds = 30.0
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cluster import ClusterConfig, FaultSpec
from .ensemble import ObjectiveConfig
from .errors import AutoEnsembleError, ConfigError
from .search import SearchConfig
from .subnetworks import GeneratorConfig

_NUM = (int, float)

SCHEMA = {
    "": {"seed": int, "output_dir": str},
    "data": {"train": str, "eval": str, "label_column": str},
    "search": {
        "generator": str, "iterations": int, "steps_per_iteration": int, "batch_size": int,
        "learning_rate": _NUM, "width": int, "mlp_depth": int, "num_stumps": int,
        "activation": str, "ensembler": str, "strategies": list, "selection_metric": str,
        "checkpoint_every": int, "probe_size": int,
    },
    "objective": {
        "lambda": _NUM, "beta": _NUM, "surrogate": str, "measure": str, "rho": _NUM,
        "max_prox_steps": int, "tol": _NUM,
    },
    "cluster": {"num_workers": int, "strategy": str, "fault_plan": list, "watchdog_seconds": _NUM},
}


@dataclass(frozen=True)
class RunConfig:
    train_path: Path
    eval_path: Optional[Path]
    label_column: str
    output_dir: Path
    search: SearchConfig
    cluster: ClusterConfig

    def to_dict(self) -> dict:
        return {
            "train_path": str(self.train_path),
            "eval_path": None if self.eval_path is None else str(self.eval_path),
            "label_column": self.label_column,
            "output_dir": str(self.output_dir),
            "search": asdict(self.search),
            "cluster": asdict(self.cluster),
        }


def _check_section(name: str, table: dict) -> None:
    allowed = SCHEMA[name]
    label = name or "top level"
    for key, value in table.items():
        if key in SCHEMA and name == "":
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            continue
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {label}; allowed: {sorted(allowed)}")
        expected = allowed[key]
        if isinstance(value, bool) or not isinstance(value, expected):
            raise ConfigError(f"{label}.{key} has wrong type {type(value).__name__}")


def parse_run_config(doc: dict, base_dir=".") -> RunConfig:
    _check_section("", doc)
    for section in ("data", "search", "objective", "cluster"):
        _check_section(section, doc.get(section, {}))
    base = Path(base_dir)
    data, s, o, c = (doc.get(k, {}) for k in ("data", "search", "objective", "cluster"))
    if "train" not in data:
        raise ConfigError("[data] train is required")

    def resolve(p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        gen = GeneratorConfig(
            kind=s.get("generator", "grow"),
            width=s.get("width", 8),
            mlp_depth=s.get("mlp_depth", 1),
            num_stumps=s.get("num_stumps", 20),
            activation=s.get("activation", "tanh"),
        )
        obj = ObjectiveConfig(
            lam=float(o.get("lambda", 0.01)),
            beta=float(o.get("beta", 0.001)),
            surrogate=o.get("surrogate", "exp"),
            measure=o.get("measure", "rademacher_proxy"),
            rho=float(o.get("rho", 0.1)),
            max_prox_steps=o.get("max_prox_steps", 500),
            tol=float(o.get("tol", 1e-10)),
        )
        search = SearchConfig(
            generator=gen,
            objective=obj,
            strategies=tuple(s.get("strategies", ["grow"])),
            ensembler=s.get("ensembler", "complexity_regularized"),
            iterations=s.get("iterations", 3),
            steps_per_iteration=s.get("steps_per_iteration", 200),
            batch_size=s.get("batch_size", 64),
            learning_rate=float(s.get("learning_rate", 0.1)),
            selection_metric=s.get("selection_metric", "train_objective"),
            checkpoint_every=s.get("checkpoint_every", 50),
            probe_size=s.get("probe_size", 32),
            seed=doc.get("seed", 0),
        )
        faults = []
        for entry in c.get("fault_plan", []):
            if not isinstance(entry, list) or not 2 <= len(entry) <= 3:
                raise ConfigError(f"fault_plan entries must be [worker, step] or [worker, step, phase], got {entry!r}")
            faults.append(FaultSpec(*entry))
        cluster = ClusterConfig(
            num_workers=c.get("num_workers", 1),
            strategy=c.get("strategy", "replication"),
            fault_plan=tuple(faults),
            watchdog_seconds=float(c.get("watchdog_seconds", 30.0)),
        )
    except ConfigError:
        raise
    except (AutoEnsembleError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if search.selection_metric == "eval_loss" and "eval" not in data:
        raise ConfigError("selection_metric 'eval_loss' needs [data] eval")
    return RunConfig(
        train_path=resolve(data["train"]),
        eval_path=resolve(data["eval"]) if "eval" in data else None,
        label_column=data.get("label_column", "label"),
        output_dir=resolve(doc.get("output_dir", "run")),
        search=search,
        cluster=cluster,
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_run_config(doc, path.parent)
