import json
import logging

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

import autoensemble.search as search
from autoensemble.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from autoensemble.data import two_gaussians
from autoensemble.ensemble import ObjectiveConfig, ensemble_logits
from autoensemble.errors import ConfigError, IterationError, RecoveryError
from autoensemble.numerics import make_rng
from autoensemble.search import (
    AutoEnsembleSearch,
    IterationState,
    SearchConfig,
    bookkeeping,
    build_candidates,
    evaluate_candidates,
    fit_candidates,
    initial_checkpoint,
    read_metrics,
    rebuild_ensemble,
    run_iteration,
    save_progress,
    start_iteration,
    state_from_checkpoint,
    state_to_checkpoint,
    train_state,
)
from autoensemble.subnetworks import GeneratorConfig, SubnetworkSpec, init_subnetwork

from conftest import separable_2d


def linear_only_state(cfg, d=2, t=0, best=None):
    sn = init_subnetwork(SubnetworkSpec("linear"), d, f"t{t}_linear", make_rng(cfg.seed, "init", "lin"), t)
    return IterationState(t, best, [sn], t * cfg.steps_per_iteration, cfg.digest())


def test_iteration_zero_single_linear(small_cfg):
    data = separable_2d(100, seed=2)
    best, nxt, outcome = run_iteration(linear_only_state(small_cfg), data, None, small_cfg)
    assert best.ids == ["t0_linear"]
    assert len(outcome.ensembles) == 1 and outcome.best_index == 0
    assert nxt.iteration_number == 1


def _junk_state(cfg, best):
    # a constant-zero newcomer that contributes nothing
    junk = init_subnetwork(SubnetworkSpec("linear"), 2, "t1_junk", make_rng(0), 1)
    junk = replace(junk, train_steps_done=cfg.steps_per_iteration)
    return IterationState(1, best, [junk], cfg.steps_per_iteration, cfg.digest())


def test_previous_best_reselected_when_new_is_worse(small_cfg, gaussians):
    cfg = replace(small_cfg, ensembler="uniform")
    best, _, _ = run_iteration(start_iteration(None, cfg, 0, 2), gaussians, None, cfg)
    outcome = search.evaluate_iteration(_junk_state(cfg, best), gaussians, None, cfg)
    assert outcome.scores[1] > outcome.scores[0]
    assert outcome.best.candidate_id == "t1_previous"
    assert outcome.scores[outcome.best_index] == best.objective_value


def test_warm_started_candidate_never_worse(small_cfg, gaussians):
    best, _, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    outcome = search.evaluate_iteration(_junk_state(small_cfg, best), gaussians, None, small_cfg)
    assert outcome.scores[0] == best.objective_value
    assert outcome.scores[1] <= outcome.scores[0]


def test_zero_weight_newcomer_is_not_selected(small_cfg, gaussians):
    best, _, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    outcome = search.evaluate_iteration(_junk_state(small_cfg, best), gaussians, None, small_cfg)
    assert outcome.ensembles[1].weights[-1] == 0.0
    assert outcome.scores[1] == outcome.scores[0]
    assert outcome.best.candidate_id == "t1_previous"


def test_candidates_put_previous_first(small_cfg, gaussians):
    best, state, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    cfg = replace(small_cfg, strategies=("grow", "all"))
    state = start_iteration(best, cfg, 1, 2)
    cands = build_candidates(state, cfg)
    assert [c.strategy_tag for c in cands] == ["previous", "grow", "grow", "all"]
    assert all(c.subnetworks[: len(best.subnetworks)] == best.subnetworks for c in cands)


def test_scores_non_increasing(small_cfg, gaussians):
    cfg = replace(small_cfg, iterations=3)
    state = start_iteration(None, cfg, 0, 2)
    scores = []
    for _ in range(3):
        best, state, outcome = run_iteration(state, gaussians, None, cfg)
        scores.append(outcome.scores[outcome.best_index])
    assert all(b <= a for a, b in zip(scores, scores[1:]))


def test_grow_follows_previous_depth(small_cfg, gaussians):
    best, state, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    l = best.deepest_depth()
    assert sorted(sn.spec.depth for sn in state.subnetworks) == [l, l + 1]


def _trained_checkpoint(cfg, data, tmp_path, best=None, t=0):
    state = start_iteration(best, cfg, t, data.d)
    train_state(state, data, cfg, cfg.steps_per_iteration)
    save_progress(state, cfg, tmp_path)
    return state


def test_bookkeeping_increments_and_warm_starts(small_cfg, gaussians, tmp_path):
    cfg = replace(small_cfg, iterations=5)
    state = _trained_checkpoint(cfg, gaussians, tmp_path)
    for t in range(4):
        res = bookkeeping(tmp_path, gaussians, None, cfg)
        assert res.iteration == t
        ck = load_checkpoint(tmp_path)
        assert ck.iteration_number == t + 1 and ck.kind == "bookkeeping"
        assert res.probe_diff <= 1e-12
        nxt = state_from_checkpoint(ck)
        probe = gaussians.X[: cfg.probe_size]
        assert np.max(np.abs(ensemble_logits(nxt.best, probe) - ensemble_logits(res.outcome.best, probe))) <= 1e-12
        train_state(nxt, gaussians, cfg, cfg.steps_per_iteration)
        save_progress(nxt, cfg, tmp_path)


def test_bookkeeping_requires_trained_state(small_cfg, gaussians, tmp_path):
    initial_checkpoint(tmp_path, gaussians, small_cfg)
    with pytest.raises(RecoveryError):
        bookkeeping(tmp_path, gaussians, None, small_cfg)


def test_metadata_rebuild_is_structurally_equal(small_cfg, gaussians):
    best, _, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    ck = state_to_checkpoint(IterationState(1, best, [], 0, small_cfg.digest()), "bookkeeping")
    meta = json.loads(json.dumps(best.metadata()))
    rebuilt = rebuild_ensemble(meta, ck.arrays, best.weights)
    assert rebuilt.metadata() == best.metadata()
    assert [sn.spec for sn in rebuilt.subnetworks] == [sn.spec for sn in best.subnetworks]
    for a, b in zip(rebuilt.subnetworks, best.subnetworks):
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_state_checkpoint_round_trip(small_cfg, gaussians, tmp_path):
    best, state, _ = run_iteration(start_iteration(None, small_cfg, 0, 2), gaussians, None, small_cfg)
    save_checkpoint(state_to_checkpoint(state, "bookkeeping"), tmp_path)
    back = state_from_checkpoint(load_checkpoint(tmp_path))
    assert back.iteration_number == state.iteration_number
    assert state_to_checkpoint(back, "bookkeeping") == state_to_checkpoint(state, "bookkeeping")


def test_evaluate_candidates_examples():
    assert evaluate_candidates([0.5, 0.3, 0.9])[1] == 1
    assert evaluate_candidates([0.4, 0.4, 0.4])[1] == 0
    assert evaluate_candidates([0.7, 0.2, 0.2])[1] == 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5]), min_size=1, max_size=8), st.randoms())
def test_ranking_invariant_under_permutation(scores, rnd):
    # candidates keyed by generation index; permuting the list must not change the winner's id
    ids = list(range(len(scores)))
    perm = ids[:]
    rnd.shuffle(perm)
    ranking, _ = evaluate_candidates(scores)
    winner = ranking[0]
    shuffled = [scores[i] for i in perm]
    order = sorted(range(len(perm)), key=lambda k: (shuffled[k], perm[k]))
    assert perm[order[0]] == winner


def test_search_is_deterministic(small_cfg, gaussians, tmp_path):
    a = AutoEnsembleSearch(small_cfg, tmp_path / "a").run(gaussians)
    b = AutoEnsembleSearch(small_cfg, tmp_path / "b").run(gaussians)
    assert a.best.ids == b.best.ids
    assert a.best.weights.tobytes() == b.best.weights.tobytes()
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()


class Killed(Exception):
    pass


@pytest.mark.parametrize("kill_after", [1, 2, 4, 6, 8])
def test_crash_restart_equivalence(small_cfg, gaussians, tmp_path, monkeypatch, kill_after):
    ref = AutoEnsembleSearch(small_cfg, tmp_path / "ref").run(gaussians)
    real = search.save_checkpoint
    count = {"n": 0}

    def flaky(*args, **kwargs):
        out = real(*args, **kwargs)
        count["n"] += 1
        if count["n"] == kill_after:
            raise Killed()
        return out

    monkeypatch.setattr(search, "save_checkpoint", flaky)
    with pytest.raises(Killed):
        AutoEnsembleSearch(small_cfg, tmp_path / "run").run(gaussians)
    monkeypatch.setattr(search, "save_checkpoint", real)
    res = AutoEnsembleSearch(small_cfg, tmp_path / "run").run(gaussians)
    assert res.best.ids == ref.best.ids
    assert np.max(np.abs(res.best.weights - ref.best.weights)) <= 1e-6
    assert (tmp_path / "run/metrics.csv").read_bytes() == (tmp_path / "ref/metrics.csv").read_bytes()


def test_metrics_layout(small_cfg, gaussians, gaussians_eval, tmp_path):
    AutoEnsembleSearch(small_cfg, tmp_path).run(gaussians, gaussians_eval)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert list(rows[0]) == list(search.METRIC_COLUMNS)
    for t in range(small_cfg.iterations):
        cands = [r for r in rows if r["iteration"] == str(t) and r["record"] == "candidate"]
        assert sum(r["selected"] == "1" for r in cands) == 1
        assert all(r["eval_accuracy"] for r in cands)
        assert any(r["record"] == "complexity" and r["iteration"] == str(t) for r in rows)
    assert (tmp_path / "timing.csv").exists()


def test_eval_loss_selection(small_cfg, gaussians, gaussians_eval, tmp_path):
    cfg = replace(small_cfg, selection_metric="eval_loss")
    res = AutoEnsembleSearch(cfg, tmp_path).run(gaussians, gaussians_eval)
    assert res.best.subnetworks
    with pytest.raises(ConfigError):
        AutoEnsembleSearch(cfg, tmp_path / "x").run(gaussians)


def test_uniform_ensembler(small_cfg, gaussians, tmp_path):
    cfg = replace(small_cfg, ensembler="uniform")
    res = AutoEnsembleSearch(cfg, tmp_path).run(gaussians)
    w = res.best.weights
    assert np.all(w == w[0]) and abs(np.sum(np.abs(w)) - 1.0) <= 1e-15


def test_resume_with_other_config_rejected(small_cfg, gaussians, tmp_path):
    AutoEnsembleSearch(small_cfg, tmp_path).run(gaussians)
    with pytest.raises(ConfigError):
        AutoEnsembleSearch(replace(small_cfg, learning_rate=0.5), tmp_path).run(gaussians)


def test_rerun_on_finished_directory_is_a_no_op(small_cfg, gaussians, tmp_path):
    first = AutoEnsembleSearch(small_cfg, tmp_path).run(gaussians)
    before = (tmp_path / "metrics.csv").read_bytes()
    again = AutoEnsembleSearch(small_cfg, tmp_path).run(gaussians)
    assert again.history == [] and again.best.ids == first.best.ids
    assert (tmp_path / "metrics.csv").read_bytes() == before


def test_single_class_warns(small_cfg, tmp_path, caplog):
    data = two_gaussians(60, seed=3)
    data = replace(data, y=np.ones(60))
    cfg = replace(small_cfg, iterations=1, steps_per_iteration=5)
    with caplog.at_level(logging.WARNING):
        AutoEnsembleSearch(cfg, tmp_path).run(data)
    assert "single class" in caplog.text


def test_all_diverged_at_start_is_iteration_error(small_cfg, gaussians):
    state = IterationState(0, None, [], 0, small_cfg.digest())
    with pytest.raises(IterationError):
        fit_candidates(state, gaussians, small_cfg)


def test_diverged_subnetwork_dropped(small_cfg, gaussians, monkeypatch):
    from autoensemble.errors import TrainingError

    real = search.train_step

    def explode(sn, X, y, lr):
        if sn.spec.depth == 1:
            raise TrainingError("boom")
        return real(sn, X, y, lr)

    monkeypatch.setattr(search, "train_step", explode)
    state = start_iteration(None, small_cfg, 0, 2)
    best, _, _ = run_iteration(state, gaussians, None, small_cfg)
    assert state.diverged == ["t0_mlp_d1"]
    assert best.ids == ["t0_mlp_d0"]


def test_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(strategies=("bogus",))
    with pytest.raises(ConfigError):
        SearchConfig(generator=GeneratorConfig(kind="pool"), objective=ObjectiveConfig(measure="jacobian_norm"))
    with pytest.raises(ConfigError):
        SearchConfig(seed=-1)
    assert SearchConfig().digest() == SearchConfig().digest() != SearchConfig(seed=1).digest()
