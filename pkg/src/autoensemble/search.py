"""Adaptive ensemble search: the per-iteration loop and its bookkeeping phase.

Iteration ``t`` trains the new subnetworks proposed by the generator, forms
candidate ensembles from them and the previous best ensemble, fits each
candidate's mixture weights, and keeps the best-scoring candidate as the
new best ensemble. The previous best is always a candidate, so the selection
score can never get worse from one iteration to the next.

Between iterations a bookkeeping phase evaluates the trained candidates from
the latest checkpoint, serialises the winner's architecture metadata,
rebuilds the winner from that metadata with its parameters restored from
the checkpoint, and writes a new checkpoint for ``t + 1`` that also contains
the freshly initialised subnetworks of the next iteration.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .complexity import ComplexityReport, compute_complexity, measure_supports
from .data import Dataset
from .ensemble import (
    EnsembleModel,
    ObjectiveConfig,
    accuracy,
    deepboost_bound,
    ensemble_logits,
    fit_mixture_weights,
    margin_error,
    objective,
    saturated_count,
    subnetwork_logits,
    surrogate,
    uniform_weights,
)
from .errors import CheckpointNotFoundError, ConfigError, IterationError, RecoveryError, TrainingError
from .numerics import make_rng
from .subnetworks import (
    GeneratorConfig,
    Subnetwork,
    from_metadata,
    generate_candidates,
    init_subnetwork,
    subnetwork_id,
    train_step,
)

log = logging.getLogger(__name__)

STRATEGIES = ("grow", "all")
ENSEMBLERS = ("complexity_regularized", "uniform")
SELECTION_METRICS = ("train_objective", "eval_loss")

METRIC_COLUMNS = (
    "iteration",
    "record",
    "candidate_id",
    "subnetwork_id",
    "members",
    "measure",
    "value",
    "objective",
    "score",
    "l1_norm",
    "train_accuracy",
    "eval_accuracy",
    "margin_error",
    "bound_complexity",
    "bound_slack",
    "bound_total",
    "saturated",
    "selected",
    "train_step",
)


@dataclass(frozen=True)
class SearchConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    strategies: tuple = ("grow",)
    ensembler: str = "complexity_regularized"
    iterations: int = 3
    steps_per_iteration: int = 200
    batch_size: int = 64
    learning_rate: float = 0.1
    selection_metric: str = "train_objective"
    checkpoint_every: int = 50
    probe_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if not self.strategies or any(s not in STRATEGIES for s in self.strategies):
            raise ConfigError(f"strategies must be drawn from {STRATEGIES}, got {self.strategies}")
        if self.ensembler not in ENSEMBLERS:
            raise ConfigError(f"unknown ensembler {self.ensembler!r}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"unknown selection metric {self.selection_metric!r}")
        if self.iterations < 1 or self.steps_per_iteration < 1 or self.batch_size < 1:
            raise ConfigError("iterations, steps_per_iteration and batch_size must be >= 1")
        if self.checkpoint_every < 1 or self.probe_size < 1:
            raise ConfigError("checkpoint_every and probe_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.generator.kind == "pool" and not measure_supports(self.objective.measure, "stumps"):
            raise ConfigError(
                f"measure {self.objective.measure!r} cannot score the stumps in the pool generator"
            )

    def digest(self) -> str:
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class IterationState:
    """Everything needed to resume iteration ``iteration_number``."""

    iteration_number: int
    best: Optional[EnsembleModel]
    subnetworks: list
    train_step: int
    config_digest: str
    diverged: list = field(default_factory=list)

    @property
    def best_metadata(self) -> Optional[dict]:
        return None if self.best is None else self.best.metadata()

    def local_step(self, cfg: SearchConfig) -> int:
        if not self.subnetworks:
            return cfg.steps_per_iteration
        return min(sn.train_steps_done for sn in self.subnetworks)

    def is_trained(self, cfg: SearchConfig) -> bool:
        return self.local_step(cfg) >= cfg.steps_per_iteration


@dataclass
class Candidate:
    id: str
    subnetworks: tuple
    strategy_tag: str
    state: str = "pending"


def start_iteration(
    best: Optional[EnsembleModel], cfg: SearchConfig, iteration: int, input_dim: int
) -> IterationState:
    """State at the start of ``iteration``: new subnetworks freshly initialised.

    Initialisation draws from a stream keyed by the subnetwork id, so it does
    not depend on which worker builds it.
    """
    subnetworks = []
    if iteration < cfg.iterations:
        meta = None if best is None else best.metadata()
        for spec in generate_candidates(cfg.generator, meta, iteration):
            sid = subnetwork_id(spec, iteration)
            rng = make_rng(cfg.seed, "init", sid)
            subnetworks.append(init_subnetwork(spec, input_dim, sid, rng, iteration))
    return IterationState(
        iteration, best, subnetworks, iteration * cfg.steps_per_iteration, cfg.digest()
    )


def batch_indices(cfg: SearchConfig, m: int, sn_id: str, step: int) -> np.ndarray:
    """Minibatch for subnetwork ``sn_id`` at its local ``step`` (with replacement)."""
    return make_rng(cfg.seed, "batch", sn_id, step).integers(0, m, size=cfg.batch_size)


def train_subnetwork(sn: Subnetwork, data: Dataset, cfg: SearchConfig, until: int) -> Subnetwork:
    for step in range(sn.train_steps_done, until):
        idx = batch_indices(cfg, data.m, sn.id, step)
        sn, _ = train_step(sn, data.X[idx], data.y[idx], cfg.learning_rate)
    return sn


def train_state(state: IterationState, data: Dataset, cfg: SearchConfig, until: int) -> None:
    """Advance every live subnetwork to local step ``until``; drop any that diverge."""
    live = []
    for sn in state.subnetworks:
        try:
            live.append(train_subnetwork(sn, data, cfg, until))
        except TrainingError as exc:
            log.warning("iteration %d: %s diverged (%s)", state.iteration_number, sn.id, exc)
            state.diverged.append(sn.id)
    state.subnetworks = live
    state.train_step = state.iteration_number * cfg.steps_per_iteration + until


# -- checkpoint conversion -------------------------------------------------


def _param_key(prefix: str, sn_id: str, name: str) -> str:
    return f"{prefix}/{sn_id}/{name}"


def state_to_checkpoint(state: IterationState, kind: str) -> Checkpoint:
    arrays = {}
    best_meta = None
    if state.best is not None:
        best_meta = state.best.metadata()
        arrays["best/weights"] = state.best.weights
        for sn in state.best.subnetworks:
            for name, v in sn.params.items():
                arrays[_param_key("best", sn.id, name)] = v
    for sn in state.subnetworks:
        for name, v in sn.params.items():
            arrays[_param_key("new", sn.id, name)] = v
    metadata = {
        "config_digest": state.config_digest,
        "best": best_meta,
        "subnetworks": [sn.metadata() for sn in state.subnetworks],
        "diverged": list(state.diverged),
    }
    return Checkpoint(state.iteration_number, state.train_step, metadata, arrays, kind)


def _params_for(arrays: dict, sn_id: str) -> dict:
    for prefix in ("best", "new"):
        head = f"{prefix}/{sn_id}/"
        found = {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}
        if found:
            return found
    raise RecoveryError(f"checkpoint holds no parameters for subnetwork {sn_id}")


def rebuild_ensemble(meta: dict, arrays: dict, weights) -> EnsembleModel:
    """Reconstruct an ensemble from architecture metadata, restoring parameters by id."""
    subnetworks = [from_metadata(m, _params_for(arrays, m["id"])) for m in meta["subnetworks"]]
    reports = [ComplexityReport.from_dict(r) for r in meta["complexity_reports"]]
    return EnsembleModel(
        tuple(subnetworks),
        np.asarray(weights, dtype=np.float64),
        float(meta["objective_value"]),
        tuple(reports),
        str(meta["candidate_id"]),
    )


def state_from_checkpoint(ckpt: Checkpoint) -> IterationState:
    meta = ckpt.metadata
    best = None
    if meta["best"] is not None:
        best = rebuild_ensemble(meta["best"], ckpt.arrays, ckpt.arrays["best/weights"])
    subnetworks = [from_metadata(m, _params_for(ckpt.arrays, m["id"])) for m in meta["subnetworks"]]
    return IterationState(
        ckpt.iteration_number,
        best,
        subnetworks,
        ckpt.train_step,
        str(meta["config_digest"]),
        list(meta["diverged"]),
    )


# -- candidates, ensemblers, evaluator -------------------------------------


def build_candidates(state: IterationState, cfg: SearchConfig) -> list[Candidate]:
    """Candidate groups; the previous best, if any, always comes first."""
    t = state.iteration_number
    prev = tuple(state.best.subnetworks) if state.best is not None else ()
    cands = []
    if state.best is not None:
        cands.append(Candidate(f"t{t}_previous", prev, "previous"))
    seen = set()
    for strategy in cfg.strategies:
        if strategy == "grow":
            groups = [(f"t{t}_grow_{sn.id}", prev + (sn,)) for sn in state.subnetworks]
        else:
            groups = [(f"t{t}_all", prev + tuple(state.subnetworks))] if state.subnetworks else []
        for cid, members in groups:
            key = tuple(sn.id for sn in members)
            if key in seen:
                continue
            seen.add(key)
            cands.append(Candidate(cid, members, strategy))
    return cands


def compute_reports(subnetworks: Sequence[Subnetwork], data: Dataset, cfg: SearchConfig) -> dict:
    return {sn.id: compute_complexity(sn, data, cfg.objective.measure) for sn in subnetworks}


def fit_candidate(
    cand: Candidate,
    best: Optional[EnsembleModel],
    reports: dict,
    data: Dataset,
    cfg: SearchConfig,
) -> EnsembleModel:
    """Mixture weights for one candidate.

    The carried-over previous best keeps its weights. New candidates are
    warm-started from the previous best's weights with zero for each new
    member, so their objective starts at the previous best's value. If the
    fit leaves every new member at zero weight, the candidate falls back to
    those starting weights and cannot beat the previous best.
    """
    members = list(cand.subnetworks)
    member_reports = tuple(reports[sn.id] for sn in members)
    r = np.array([rep.value for rep in member_reports])
    logits = subnetwork_logits(members, data.X)
    if cand.strategy_tag == "previous":
        w = best.weights
    elif cfg.ensembler == "uniform":
        w = uniform_weights(len(members))
    else:
        prev = {} if best is None else dict(zip(best.ids, best.weights))
        w0 = np.array([prev.get(sn.id, 0.0) for sn in members])
        w = fit_mixture_weights(logits, data.y, cfg.objective, r, w0).weights
        is_new = np.array([sn.id not in prev for sn in members])
        if best is not None and not np.any(w[is_new]):
            # every newcomer was thresholded away: the candidate is just the
            # previous ensemble, and ties go to the carried-over candidate
            w = w0
    F = objective(w, logits, data.y, cfg.objective, r)
    return EnsembleModel(tuple(members), w, F, member_reports, cand.id)


def fit_candidates(state: IterationState, data: Dataset, cfg: SearchConfig) -> list[EnsembleModel]:
    cands = build_candidates(state, cfg)
    if not cands:
        raise IterationError(f"iteration {state.iteration_number}: no candidate survived training")
    reports = compute_reports(state.subnetworks, data, cfg)
    if state.best is not None:
        reports.update({rep.subnetwork_id: rep for rep in state.best.complexity_reports})
    return [fit_candidate(c, state.best, reports, data, cfg) for c in cands]


def selection_score(
    ens: EnsembleModel, train: Dataset, eval_data: Optional[Dataset], cfg: SearchConfig
) -> float:
    if cfg.selection_metric == "train_objective":
        return ens.objective_value
    if eval_data is None:
        raise ConfigError("selection_metric 'eval_loss' needs an evaluation dataset")
    f = ensemble_logits(ens, eval_data.X)
    return math.fsum(surrogate(cfg.objective.surrogate, 1.0 - eval_data.y * f)) / eval_data.m


def evaluate_candidates(scores: Sequence[float]) -> tuple[list[int], int]:
    """Candidate indices ranked by ascending score; ties keep generation order."""
    ranking = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return ranking, ranking[0]


@dataclass
class IterationOutcome:
    iteration: int
    ensembles: list
    scores: list
    best_index: int
    rows: list

    @property
    def best(self) -> EnsembleModel:
        return self.ensembles[self.best_index]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate_iteration(
    state: IterationState,
    train: Dataset,
    eval_data: Optional[Dataset],
    cfg: SearchConfig,
    fitted: Optional[Sequence[EnsembleModel]] = None,
) -> IterationOutcome:
    """Fit (unless given), score and rank this iteration's candidates."""
    ensembles = list(fitted) if fitted is not None else fit_candidates(state, train, cfg)
    scores = [selection_score(e, train, eval_data, cfg) for e in ensembles]
    _, best_idx = evaluate_candidates(scores)
    t = state.iteration_number
    end_step = (t + 1) * cfg.steps_per_iteration
    rows = []
    for sn in state.subnetworks:
        rep = next(r for e in ensembles for r in e.complexity_reports if r.subnetwork_id == sn.id)
        rows.append({"iteration": t, "record": "complexity", "subnetwork_id": sn.id,
                     "measure": rep.measure_kind, "value": rep.value, "train_step": end_step})
    for i, (ens, score) in enumerate(zip(ensembles, scores)):
        f_train = ensemble_logits(ens, train.X)
        bound = deepboost_bound(ens, train, cfg.objective)
        rows.append({
            "iteration": t,
            "record": "candidate",
            "candidate_id": ens.candidate_id,
            "members": "|".join(ens.ids),
            "objective": ens.objective_value,
            "score": score,
            "l1_norm": ens.l1_norm,
            "train_accuracy": accuracy(f_train, train.y),
            "eval_accuracy": None if eval_data is None else accuracy(ensemble_logits(ens, eval_data.X), eval_data.y),
            "margin_error": margin_error(f_train, train.y, cfg.objective.rho),
            "bound_complexity": bound.complexity_term,
            "bound_slack": bound.slack_term,
            "bound_total": bound.total,
            "saturated": saturated_count(cfg.objective.surrogate, 1.0 - train.y * f_train),
            "selected": int(i == best_idx),
            "train_step": end_step,
        })
    return IterationOutcome(t, ensembles, scores, best_idx, rows)


def run_iteration(
    state: IterationState, train: Dataset, eval_data: Optional[Dataset], cfg: SearchConfig
) -> tuple[EnsembleModel, IterationState, IterationOutcome]:
    """Train, ensemble and evaluate one iteration in memory, without checkpoints."""
    train_state(state, train, cfg, cfg.steps_per_iteration)
    outcome = evaluate_iteration(state, train, eval_data, cfg)
    best = outcome.best
    nxt = start_iteration(best, cfg, state.iteration_number + 1, train.d)
    return best, nxt, outcome


# -- metrics file ------------------------------------------------------------


def write_metric_rows(path, iteration: int, rows: Sequence[dict]) -> None:
    """Replace any rows for ``iteration`` and later with ``rows``, atomically."""
    path = Path(path)
    kept = []
    if path.exists():
        with path.open(newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["iteration"]) < iteration]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in kept:
        writer.writerow(r)
    for r in rows:
        writer.writerow({c: _fmt(r.get(c)) for c in METRIC_COLUMNS})
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


# -- bookkeeping ---------------------------------------------------------------


@dataclass
class BookkeepingResult:
    iteration: int
    best: EnsembleModel
    score: float
    probe_diff: float
    path: Path
    outcome: IterationOutcome
    next_state: IterationState


def bookkeeping(
    checkpoint_dir,
    train: Dataset,
    eval_data: Optional[Dataset],
    cfg: SearchConfig,
    *,
    fitted: Optional[Sequence[EnsembleModel]] = None,
    metrics_path=None,
    fault_hook: Optional[Callable[[str], None]] = None,
) -> BookkeepingResult:
    """Close iteration ``t`` and commit the checkpoint that opens ``t + 1``.

    ``fault_hook(phase)`` is called at ``"evaluated"`` and ``"params_written"``
    (after the new checkpoint's data files, before its commit marker) so that
    a simulated preemption can interrupt the phase.
    """
    hook = fault_hook or (lambda phase: None)
    ckpt = load_checkpoint(checkpoint_dir)
    state = state_from_checkpoint(ckpt)
    if state.config_digest != cfg.digest():
        raise ConfigError("checkpoint was written with a different search configuration")
    if not state.is_trained(cfg) or state.iteration_number >= cfg.iterations:
        raise RecoveryError(
            f"latest checkpoint {ckpt.stem} is not a fully trained iteration; training must resume first"
        )
    t = state.iteration_number
    outcome = evaluate_iteration(state, train, eval_data, cfg, fitted)
    hook("evaluated")

    chosen = outcome.best
    best_meta = json.loads(json.dumps(chosen.metadata()))
    warm = rebuild_ensemble(best_meta, ckpt.arrays, chosen.weights)
    probe = train.X[: cfg.probe_size]
    probe_diff = float(np.max(np.abs(ensemble_logits(chosen, probe) - ensemble_logits(warm, probe))))

    nxt = start_iteration(warm, cfg, t + 1, train.d)
    if metrics_path is not None:
        write_metric_rows(metrics_path, t, outcome.rows)
    path = save_checkpoint(
        state_to_checkpoint(nxt, "bookkeeping"), checkpoint_dir, lambda: hook("params_written")
    )
    log.info("iteration %d: selected %s (score %.6g)", t, chosen.candidate_id, outcome.scores[outcome.best_index])
    return BookkeepingResult(t, warm, outcome.scores[outcome.best_index], probe_diff, path, outcome, nxt)


def save_progress(state: IterationState, cfg: SearchConfig, checkpoint_dir) -> None:
    kind = "trained" if state.is_trained(cfg) else "train"
    save_checkpoint(state_to_checkpoint(state, kind), checkpoint_dir)


def initial_checkpoint(checkpoint_dir, train: Dataset, cfg: SearchConfig) -> IterationState:
    """Latest checkpoint's state, writing the iteration-0 checkpoint if none exists."""
    try:
        state = state_from_checkpoint(load_checkpoint(checkpoint_dir))
    except CheckpointNotFoundError:
        state = start_iteration(None, cfg, 0, train.d)
        save_checkpoint(state_to_checkpoint(state, "init"), checkpoint_dir)
        return state
    if state.config_digest != cfg.digest():
        raise ConfigError(
            f"{checkpoint_dir} holds a run with a different configuration; use a fresh output directory"
        )
    return state


@dataclass
class SearchResult:
    best: EnsembleModel
    history: list
    final_state: IterationState


class AutoEnsembleSearch:
    """Checkpointed single-process search.

    Every iteration starts from the latest valid checkpoint in
    ``<output_dir>/checkpoints``, so rerunning on the same directory resumes
    an interrupted run.
    """

    def __init__(self, cfg: SearchConfig, output_dir):
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.checkpoint_dir = self.output_dir / "checkpoints"
        self.metrics_path = self.output_dir / "metrics.csv"
        self.timing_path = self.output_dir / "timing.csv"

    def _time(self, iteration: int, phase: str, seconds: float) -> None:
        new = not self.timing_path.exists()
        with self.timing_path.open("a") as fh:
            if new:
                fh.write("iteration,phase,seconds\n")
            fh.write(f"{iteration},{phase},{seconds:.6f}\n")

    def run(self, train: Dataset, eval_data: Optional[Dataset] = None) -> SearchResult:
        cfg = self.cfg
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if train.is_single_class():
            log.warning("training data contains a single class; margins are still well defined")
        initial_checkpoint(self.checkpoint_dir, train, cfg)
        history = []
        while True:
            state = state_from_checkpoint(load_checkpoint(self.checkpoint_dir))
            if state.iteration_number >= cfg.iterations:
                break
            t0 = time.perf_counter()
            local = state.local_step(cfg)
            while local < cfg.steps_per_iteration:
                local = min(cfg.steps_per_iteration, (local // cfg.checkpoint_every + 1) * cfg.checkpoint_every)
                train_state(state, train, cfg, local)
                save_progress(state, cfg, self.checkpoint_dir)
            t1 = time.perf_counter()
            result = bookkeeping(
                self.checkpoint_dir, train, eval_data, cfg, metrics_path=self.metrics_path
            )
            self._time(state.iteration_number, "train", t1 - t0)
            self._time(state.iteration_number, "bookkeeping", time.perf_counter() - t1)
            history.append(result)
        if state.best is None:
            raise IterationError("search finished without selecting an ensemble")
        return SearchResult(state.best, history, state)
