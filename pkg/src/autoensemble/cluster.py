"""In-process simulation of distributed search with preemptible workers.

Workers are threads sharing a ``ParamStore`` (the parameter server) and the
checkpoint directory (the shared filesystem). Worker 0 is the chief and the
only one that writes checkpoints or runs bookkeeping; the others idle-loop
on the checkpoint directory until the chief commits iteration ``t + 1``.

Two strategies are supported:

``replication``
    Every worker holds every candidate subnetwork. Each step the minibatch
    is split into contiguous shards, one per worker; workers push their
    shard statistics, the chief aggregates them in worker order, applies the
    update and commits the new parameters, and every worker pulls them
    before the next step (a barrier per step, no staleness).

``round_robin``
    Subnetwork ``i`` is trained only by trainer ``i mod num_trainers``. With
    three or more workers the last worker is a dedicated ensemble trainer
    that loads every subnetwork read-only and fits the mixture weights;
    otherwise the chief does it.

Subnetwork initialisation and minibatches are keyed by subnetwork id, so
the selected ensemble does not depend on the number of workers.

A preempted worker discards its in-memory state and restores from the
latest checkpoint. Round-robin trainers then replay the steps lost since
that checkpoint; replicated workers refresh their copy from the ParamStore.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import committed_stems, load_checkpoint, read_checkpoint
from .data import Dataset
from .errors import ClusterError, ConfigError, TrainingError
from .search import (
    SearchConfig,
    batch_indices,
    bookkeeping,
    fit_candidates,
    initial_checkpoint,
    save_progress,
    state_from_checkpoint,
)
from .subnetworks import aggregate, apply_update, batch_contribution, diverged_contribution, train_step

log = logging.getLogger(__name__)

STRATEGIES = ("replication", "round_robin")
PHASES = ("train", "ensemble", "bookkeeping")


@dataclass(frozen=True)
class FaultSpec:
    """Preempt ``worker_index`` once it reaches global ``step`` in ``phase``.

    ``train`` faults fire inside the training loop (or at a sync point for a
    worker that trains nothing); ``ensemble`` and ``bookkeeping`` faults fire
    during those phases of the iteration ending at or after ``step``.
    """

    worker_index: int
    step: int
    phase: str = "train"

    def __post_init__(self):
        if self.step < 0 or self.worker_index < 0:
            raise ConfigError("fault worker_index and step must be >= 0")
        if self.phase not in PHASES:
            raise ConfigError(f"fault phase must be one of {PHASES}, got {self.phase!r}")


@dataclass(frozen=True)
class ClusterConfig:
    num_workers: int = 1
    strategy: str = "replication"
    fault_plan: tuple = ()
    seed: Optional[int] = None
    watchdog_seconds: float = 30.0
    poll_interval: float = 0.002

    def __post_init__(self):
        if self.num_workers < 1:
            raise ConfigError("num_workers must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        plan = tuple(f if isinstance(f, FaultSpec) else FaultSpec(*f) for f in self.fault_plan)
        for f in plan:
            if f.worker_index >= self.num_workers:
                raise ConfigError(f"fault targets missing worker {f.worker_index}")
        object.__setattr__(self, "fault_plan", plan)
        if not self.watchdog_seconds > 0:
            raise ConfigError("watchdog_seconds must be positive")


@dataclass(frozen=True)
class WorkerRole:
    kind: str
    worker_index: int


def worker_roles(cfg: ClusterConfig) -> list[WorkerRole]:
    """Worker 0 is chief; round-robin with >= 3 workers dedicates the last to ensembling."""
    roles = []
    for i in range(cfg.num_workers):
        if i == 0:
            kind = "chief"
        elif cfg.strategy == "round_robin" and cfg.num_workers >= 3 and i == cfg.num_workers - 1:
            kind = "ensemble_trainer"
        else:
            kind = "trainer"
        roles.append(WorkerRole(kind, i))
    return roles


def ensemble_trainer_index(cfg: ClusterConfig) -> int:
    for role in worker_roles(cfg):
        if role.kind == "ensemble_trainer":
            return role.worker_index
    return 0


def trainer_indices(cfg: ClusterConfig) -> list[int]:
    return [r.worker_index for r in worker_roles(cfg) if r.kind != "ensemble_trainer"]


def assign_round_robin(num_workers: int, subnetwork_ids: Sequence[str]) -> list[int]:
    """Trainer position for each subnetwork: ``i mod num_workers``."""
    if num_workers < 1:
        raise ConfigError("num_workers must be >= 1")
    return [i % num_workers for i in range(len(subnetwork_ids))]


class ParamStore:
    """Versioned named slots; every commit is atomic and audited."""

    def __init__(self):
        self._lock = threading.Lock()
        self._slots: dict[str, tuple[int, object]] = {}
        self._pending: dict[tuple[str, int], dict[int, object]] = {}
        self.audit: list[tuple[int, str, int]] = []

    def commit(self, slot: str, value, version: int, worker: int) -> None:
        with self._lock:
            self._slots[slot] = (version, value)
            self.audit.append((worker, slot, version))

    def read(self, slot: str) -> tuple[int, object]:
        with self._lock:
            return self._slots[slot]

    def push_update(self, slot: str, step: int, worker: int, update) -> None:
        with self._lock:
            self._pending.setdefault((slot, step), {})[worker] = update

    def take_updates(self, slot: str, step: int) -> list:
        """Pushed updates for ``(slot, step)`` in worker order; removes them."""
        with self._lock:
            pending = self._pending.pop((slot, step), {})
        return [pending[w] for w in sorted(pending)]

    def writers(self) -> dict[str, set]:
        out: dict[str, set] = {}
        for worker, slot, _ in self.audit:
            out.setdefault(slot, set()).add(worker)
        return out


class RunLog:
    """Thread-safe list of ``{event, worker_index, step, iteration, ...}`` records."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[dict] = []

    def add(self, event: str, worker: int, step: int, iteration: int, **extra) -> None:
        rec = {"event": event, "worker_index": worker, "step": step, "iteration": iteration, **extra}
        with self._lock:
            self.records.append(rec)

    def events(self, event: str) -> list[dict]:
        with self._lock:
            return [r for r in self.records if r["event"] == event]

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Preempted(Exception):
    """Raised inside a worker to simulate preemption."""


class _Faults:
    def __init__(self, plan: Sequence[FaultSpec]):
        self._lock = threading.Lock()
        self._pending = list(plan)

    def check(self, worker: int, step: int, phase: str) -> None:
        with self._lock:
            for i, f in enumerate(self._pending):
                if f.worker_index == worker and f.phase == phase and f.step <= step:
                    del self._pending[i]
                    raise Preempted(f"worker {worker} preempted at step {step} ({phase})")

    def remaining(self) -> list[FaultSpec]:
        with self._lock:
            return list(self._pending)


@dataclass
class ClusterResult:
    best: object
    run_log: RunLog
    store: ParamStore
    history: list = field(default_factory=list)


class _Cluster:
    def __init__(self, ccfg: ClusterConfig, cfg: SearchConfig, train: Dataset, eval_data, output_dir):
        self.ccfg = ccfg
        self.cfg = cfg
        self.train = train
        self.eval_data = eval_data
        self.output_dir = Path(output_dir)
        self.ckpt_dir = self.output_dir / "checkpoints"
        self.metrics_path = self.output_dir / "metrics.csv"
        self.store = ParamStore()
        self.log = RunLog()
        self.faults = _Faults(ccfg.fault_plan)
        self.barrier = threading.Barrier(ccfg.num_workers, timeout=ccfg.watchdog_seconds)
        self.abort = threading.Event()
        self.errors: list[tuple[int, BaseException, str]] = []
        self.status: dict[int, str] = {i: "starting" for i in range(ccfg.num_workers)}
        self.history: list = []
        self.S = cfg.steps_per_iteration

    # -- synchronisation -------------------------------------------------

    def sync(self, worker: int, what: str) -> None:
        self.status[worker] = f"waiting at {what}"
        try:
            self.barrier.wait()
        except threading.BrokenBarrierError:
            raise ClusterError(f"worker {worker}: barrier '{what}' broken") from None
        self.status[worker] = f"past {what}"

    def dump(self) -> str:
        lines = [f"worker {w}: {s}" for w, s in sorted(self.status.items())]
        tail = self.log.records[-10:]
        lines += ["last events:"] + [json.dumps(r, sort_keys=True) for r in tail]
        return "\n".join(lines)

    def restore(self, worker: int):
        state = state_from_checkpoint(load_checkpoint(self.ckpt_dir))
        self.log.add("restored", worker, state.train_step, state.iteration_number)
        return state

    # -- phases ------------------------------------------------------------

    def sync_points(self, local: int) -> list[int]:
        every = self.cfg.checkpoint_every
        pts = list(range((local // every + 1) * every, self.S, every))
        return pts + [self.S]

    def chief_checkpoint(self, state, t: int, local: int) -> None:
        subnetworks, diverged = [], list(state.diverged)
        for sn in state.subnetworks:
            _, value = self.store.read(f"sn/{sn.id}")
            if value is None:
                if sn.id not in diverged:
                    diverged.append(sn.id)
            else:
                subnetworks.append(value)
        state.subnetworks, state.diverged = subnetworks, diverged
        state.train_step = t * self.S + local
        save_progress(state, self.cfg, self.ckpt_dir)
        self.log.add("checkpoint_written", 0, state.train_step, t)

    def train_round_robin(self, worker: int, state) -> None:
        t = state.iteration_number
        trainers = trainer_indices(self.ccfg)
        ids = [sn.id for sn in state.subnetworks]
        owner = {sid: trainers[pos] for sid, pos in zip(ids, assign_round_robin(len(trainers), ids))}
        mine = {sn.id: sn for sn in state.subnetworks if owner[sn.id] == worker}
        pos = state.local_step(self.cfg)
        for target in self.sync_points(pos):
            while pos < target:
                try:
                    if mine:
                        self.faults.check(worker, t * self.S + pos, "train")
                        for sid in list(mine):
                            sn = mine[sid]
                            if sn is None:
                                continue
                            idx = batch_indices(self.cfg, self.train.m, sid, pos)
                            try:
                                mine[sid], _ = train_step(sn, self.train.X[idx], self.train.y[idx], self.cfg.learning_rate)
                            except TrainingError:
                                mine[sid] = None
                    pos += 1
                except Preempted:
                    self.log.add("preempted", worker, t * self.S + pos, t)
                    restored = self.restore(worker)
                    kept = {sn.id: sn for sn in restored.subnetworks}
                    mine = {sid: kept.get(sid) for sid in mine}
                    pos = restored.local_step(self.cfg)
            if not mine:
                try:
                    self.faults.check(worker, t * self.S + target, "train")
                except Preempted:
                    self.log.add("preempted", worker, t * self.S + target, t)
                    self.restore(worker)
            for sid, sn in mine.items():
                self.store.commit(f"sn/{sid}", sn, t * self.S + target, worker)
            self.sync(worker, f"t{t} commit {target}")
            if worker == 0:
                self.chief_checkpoint(state, t, target)
            self.sync(worker, f"t{t} checkpoint {target}")

    def train_replication(self, worker: int, state) -> None:
        t = state.iteration_number
        n = self.ccfg.num_workers
        models = {sn.id: sn for sn in state.subnetworks}
        order = [sn.id for sn in state.subnetworks]
        if worker == 0:
            for sid, sn in models.items():
                self.store.commit(f"sn/{sid}", sn, t * self.S + state.local_step(self.cfg), 0)
        self.sync(worker, f"t{t} replicate")
        pos = state.local_step(self.cfg)
        for target in self.sync_points(pos):
            while pos < target:
                step = t * self.S + pos
                try:
                    self.faults.check(worker, step, "train")
                except Preempted:
                    self.log.add("preempted", worker, step, t)
                    self.restore(worker)
                    models = {sid: self.store.read(f"sn/{sid}")[1] for sid in order}
                for sid in order:
                    sn = models[sid]
                    if sn is None:
                        continue
                    idx = batch_indices(self.cfg, self.train.m, sid, pos)
                    part = np.array_split(idx, n)[worker]
                    try:
                        update = batch_contribution(sn, self.train.X[part], self.train.y[part])
                    except TrainingError:
                        update = diverged_contribution(sn, len(part))
                    self.store.push_update(sid, pos, worker, update)
                self.sync(worker, f"t{t} push {pos}")
                if worker == 0:
                    for sid in order:
                        sn = models[sid]
                        if sn is None:
                            continue
                        agg = aggregate(self.store.take_updates(sid, pos))
                        try:
                            if not np.isfinite(agg.loss_sum):
                                raise TrainingError(f"{sid}: non-finite batch loss")
                            new = apply_update(sn, agg, self.cfg.learning_rate)
                        except TrainingError:
                            new = None
                        self.store.commit(f"sn/{sid}", new, step + 1, 0)
                self.sync(worker, f"t{t} apply {pos}")
                models = {sid: self.store.read(f"sn/{sid}")[1] for sid in order}
                pos += 1
            if worker == 0:
                self.chief_checkpoint(state, t, target)
            self.sync(worker, f"t{t} checkpoint {target}")

    def ensemble_phase(self, worker: int, t: int) -> None:
        end = (t + 1) * self.S
        while True:
            try:
                self.faults.check(worker, end, "ensemble")
                state = state_from_checkpoint(load_checkpoint(self.ckpt_dir))
                fitted = fit_candidates(state, self.train, self.cfg)
                self.store.commit(f"mixture/t{t}", fitted, end, worker)
                self.log.add("ensemble_fitted", worker, end, t, candidates=len(fitted))
                return
            except Preempted:
                self.log.add("preempted", worker, end, t, phase="ensemble")
                self.restore(worker)

    def chief_bookkeeping(self, t: int) -> None:
        end = (t + 1) * self.S

        def hook(phase: str) -> None:
            if phase == "params_written":
                self.faults.check(0, end, "bookkeeping")

        while True:
            latest = load_checkpoint(self.ckpt_dir)
            if latest.iteration_number > t:
                return
            try:
                _, fitted = self.store.read(f"mixture/t{t}")
                result = bookkeeping(
                    self.ckpt_dir, self.train, self.eval_data, self.cfg,
                    fitted=fitted, metrics_path=self.metrics_path, fault_hook=hook,
                )
                self.history.append(result)
                self.log.add("iteration_committed", 0, end, t + 1, selected=result.best.candidate_id)
                return
            except Preempted:
                self.log.add("preempted", 0, end, t, phase="bookkeeping")
                self.restore(0)

    def idle_loop(self, worker: int, t: int) -> None:
        deadline = time.monotonic() + self.ccfg.watchdog_seconds
        self.status[worker] = f"idle waiting for iteration {t + 1}"
        while True:
            if self.abort.is_set():
                raise ClusterError(f"worker {worker}: cluster aborted")
            stems = committed_stems(self.ckpt_dir)
            if stems and stems[0][0] > t:
                try:
                    ckpt = read_checkpoint(self.ckpt_dir, stems[0][2])
                except (OSError, ValueError):
                    ckpt = None
                if ckpt is not None:
                    self.log.add("observed_checkpoint", worker, ckpt.train_step, ckpt.iteration_number)
                    return
            if time.monotonic() > deadline:
                raise ClusterError(
                    f"worker {worker}: watchdog expired waiting for iteration {t + 1}\n{self.dump()}"
                )
            time.sleep(self.ccfg.poll_interval)

    def worker_main(self, worker: int) -> None:
        try:
            self.log.add("worker_start", worker, 0, 0, role=worker_roles(self.ccfg)[worker].kind)
            if worker == 0:
                initial_checkpoint(self.ckpt_dir, self.train, self.cfg)
            self.sync(worker, "start")
            while True:
                state = state_from_checkpoint(load_checkpoint(self.ckpt_dir))
                t = state.iteration_number
                if t >= self.cfg.iterations:
                    break
                if self.ccfg.strategy == "round_robin":
                    self.train_round_robin(worker, state)
                else:
                    self.train_replication(worker, state)
                if worker == ensemble_trainer_index(self.ccfg):
                    self.ensemble_phase(worker, t)
                self.sync(worker, f"t{t} ensembled")
                if worker == 0:
                    self.chief_bookkeeping(t)
                else:
                    self.idle_loop(worker, t)
            self.status[worker] = "done"
            self.log.add("worker_done", worker, self.cfg.iterations * self.S, self.cfg.iterations)
        except BaseException as exc:  # noqa: BLE001 - surfaced by run_cluster
            self.errors.append((worker, exc, traceback.format_exc()))
            self.status[worker] = f"failed: {exc!r}"
            self.abort.set()
            self.barrier.abort()


def run_cluster(
    ccfg: ClusterConfig,
    cfg: SearchConfig,
    train: Dataset,
    eval_data: Optional[Dataset] = None,
    output_dir=".",
) -> ClusterResult:
    """Run the search on ``ccfg.num_workers`` simulated workers."""
    if ccfg.seed is not None:
        cfg = replace(cfg, seed=ccfg.seed)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    cluster = _Cluster(ccfg, cfg, train, eval_data, output_dir)
    threads = [
        threading.Thread(target=cluster.worker_main, args=(w,), name=f"worker-{w}", daemon=True)
        for w in range(ccfg.num_workers)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    cluster.log.write(output_dir / "run_log.jsonl")
    if cluster.errors:
        root = next((e for e in cluster.errors if not isinstance(e[1], ClusterError)), cluster.errors[0])
        worker, exc, tb = root
        raise ClusterError(f"worker {worker} failed: {exc}\n{tb}\n{cluster.dump()}") from exc
    state = state_from_checkpoint(load_checkpoint(cluster.ckpt_dir))
    return ClusterResult(state.best, cluster.log, cluster.store, cluster.history)


def committed_transitions(checkpoint_dir) -> dict[int, int]:
    """Count of committed bookkeeping checkpoints per iteration number."""
    counts: dict[int, int] = {}
    for t, _, stem in committed_stems(checkpoint_dir):
        meta = json.loads((Path(checkpoint_dir) / f"{stem}.meta").read_text())
        if meta["kind"] == "bookkeeping":
            counts[t] = counts.get(t, 0) + 1
    return counts
