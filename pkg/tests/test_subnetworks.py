import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoensemble.errors import PreconditionError, ShapeError, TrainingError
from autoensemble.numerics import finite_diff_gradient, make_rng
from autoensemble.subnetworks import (
    GeneratorConfig,
    SubnetworkSpec,
    best_stump_split,
    from_metadata,
    flatten_params,
    generate_candidates,
    init_subnetwork,
    mean_loss_and_grads,
    predict,
    predict_batch,
    train_step,
    with_flat_params,
)

from conftest import separable_2d


def linear(w, b=0.0):
    w = np.asarray(w, dtype=float)
    meta = {**SubnetworkSpec("linear").to_metadata(), "id": "lin", "input_dim": w.size,
            "iteration": 0, "train_steps_done": 0}
    return from_metadata(meta, {"W0": w.reshape(-1, 1), "b0": np.array([b])})


def mlp(depth, width=5, d=3, seed=0, activation="tanh"):
    spec = SubnetworkSpec("mlp", depth, width, activation=activation)
    sn = init_subnetwork(spec, d, f"mlp{depth}", make_rng(seed, "test"))
    # non-zero biases so the gradient check covers them
    rng = np.random.default_rng(seed)
    flat = flatten_params(sn) + 0.1 * rng.standard_normal(flatten_params(sn).size)
    return with_flat_params(sn, flat)


def stumps(features, thresholds, left, right, d=2):
    spec = SubnetworkSpec("stumps", num_stumps=max(1, len(features)))
    meta = {**spec.to_metadata(), "id": "st", "input_dim": d, "iteration": 0, "train_steps_done": 0}
    arr = lambda v: np.asarray(v, dtype=float)
    return from_metadata(meta, {"feature": arr(features), "threshold": arr(thresholds),
                                "left": arr(left), "right": arr(right)})


def test_linear_prediction():
    assert predict(linear([3, 4]), [1, 1]) == 7.0


def test_zero_mlp_predicts_zero():
    sn = mlp(2)
    zero = with_flat_params(sn, np.zeros(flatten_params(sn).size))
    assert predict(zero, [0.3, -2.0, 5.0]) == 0.0


def test_stumps_match_vote_sum():
    sn = stumps([0, 1, 0], [0.0, 0.5, -1.0], [1.0, -2.0, 0.25], [-1.0, 3.0, 0.5])
    X = np.random.default_rng(0).uniform(-2, 2, size=(50, 2))
    for x in X:
        votes = 0.0
        for f, t, lv, rv in [(0, 0.0, 1.0, -1.0), (1, 0.5, -2.0, 3.0), (0, -1.0, 0.25, 0.5)]:
            votes += lv if x[f] <= t else rv
        assert predict(sn, x) == pytest.approx(votes, abs=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        predict(linear([3, 4]), [1, 1, 1])


def test_zero_linear_loss_is_log2():
    spec = SubnetworkSpec("linear")
    sn = init_subnetwork(spec, 2, "lin", make_rng(0))
    X = np.random.default_rng(1).standard_normal((10, 2))
    y = np.where(X[:, 0] > 0, 1.0, -1.0)
    _, loss = train_step(sn, X, y, 0.1)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradient_matches_finite_differences(seed):
    sn = mlp(1 + seed % 3, seed=seed, activation="tanh")
    rng = np.random.default_rng(100 + seed)
    X = rng.standard_normal((8, 3))
    y = np.where(rng.random(8) < 0.5, -1.0, 1.0)
    _, grads = mean_loss_and_grads(sn, X, y)
    analytic = np.concatenate([grads[k].reshape(-1) for k in sn.params])
    numeric = finite_diff_gradient(lambda p: mean_loss_and_grads(with_flat_params(sn, p), X, y)[0],
                                   flatten_params(sn))
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel <= 1e-5


def test_non_positive_lr_rejected():
    sn = linear([1, 1])
    with pytest.raises(PreconditionError):
        train_step(sn, np.ones((2, 2)), np.ones(2), 0.0)
    with pytest.raises(PreconditionError):
        train_step(sn, np.ones((2, 2)), np.ones(2), -1.0)


def test_non_finite_forward_is_training_error():
    sn = linear([1e308, 1e308])
    with pytest.raises(TrainingError):
        train_step(sn, np.full((2, 2), 10.0), np.ones(2), 0.1)


def test_linear_learns_separable_data():
    data = separable_2d(200, seed=4)
    sn = init_subnetwork(SubnetworkSpec("linear"), 2, "lin", make_rng(0))
    for step in range(2000):
        sn, _ = train_step(sn, data.X, data.y, 1.0)
        if np.all(np.sign(predict_batch(sn, data.X)) == data.y):
            break
    assert np.all(np.sign(predict_batch(sn, data.X)) == data.y)


def test_stumps_grow_to_cap():
    data = separable_2d(60, seed=1)
    sn = init_subnetwork(SubnetworkSpec("stumps", num_stumps=3), 2, "st", make_rng(0))
    losses = []
    for _ in range(5):
        sn, loss = train_step(sn, data.X, data.y, 0.5)
        losses.append(loss)
    assert sn.num_fitted_stumps == 3 and sn.train_steps_done == 5
    assert losses[0] == pytest.approx(math.log(2))
    assert losses[2] < losses[0]


def test_stump_split_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(20):
        X = np.round(rng.standard_normal((15, 3)), 1)
        r = rng.standard_normal(15)
        f, t = best_stump_split(X, r)

        def sse(j, thr):
            left = X[:, j] <= thr
            out = 0.0
            for side in (left, ~left):
                if side.any():
                    out += np.sum((r[side] - r[side].mean()) ** 2)
            return out

        best = min(
            sse(j, 0.5 * (a + b))
            for j in range(3)
            for a, b in zip(np.unique(X[:, j])[:-1], np.unique(X[:, j])[1:])
        )
        assert sse(f, t) == pytest.approx(best, abs=1e-10)


def test_predict_is_deterministic():
    sn = mlp(2, seed=3)
    x = np.array([0.1, -0.7, 2.0])
    assert predict(sn, x).hex() == predict(sn, x).hex()
    X = np.random.default_rng(0).standard_normal((9, 3))
    batch = predict_batch(sn, X)
    for i in range(9):
        assert batch[i] == predict(sn, X[i])


def test_init_is_seeded():
    spec = SubnetworkSpec("mlp", 2, 4)
    a = init_subnetwork(spec, 3, "a", make_rng(1, "init", "a"))
    b = init_subnetwork(spec, 3, "a", make_rng(1, "init", "a"))
    np.testing.assert_array_equal(flatten_params(a), flatten_params(b))
    assert np.all(np.abs(a.params["W0"]) <= 1 / math.sqrt(3))


def test_grow_generator_examples():
    cfg = GeneratorConfig()
    prev = {"subnetworks": [{"family": "mlp", "depth": 2}, {"family": "mlp", "depth": 1}]}
    assert [s.depth for s in generate_candidates(cfg, prev, 3)] == [2, 3]
    assert [s.depth for s in generate_candidates(cfg, None, 0)] == [0, 1]


def test_pool_generator():
    for t in range(3):
        specs = generate_candidates(GeneratorConfig(kind="pool"), None, t)
        assert sorted(s.family for s in specs) == ["linear", "mlp", "stumps"]


def test_negative_iteration_rejected():
    with pytest.raises(PreconditionError):
        generate_candidates(GeneratorConfig(), None, -1)


member = st.fixed_dictionaries({
    "family": st.sampled_from(["linear", "mlp", "stumps"]),
    "depth": st.integers(0, 12),
})


@settings(max_examples=200, deadline=None)
@given(st.lists(member, min_size=1, max_size=6), st.integers(1, 50))
def test_grow_depths_follow_metadata(members, t):
    dense = [m["depth"] for m in members if m["family"] != "stumps"]
    specs = generate_candidates(GeneratorConfig(), {"subnetworks": members}, t)
    l = max(dense) if dense else 0
    assert [s.depth for s in specs] == [l, l + 1]


specs = st.builds(
    SubnetworkSpec,
    family=st.just("mlp"),
    depth=st.integers(0, 10),
    width=st.integers(1, 64),
    num_stumps=st.integers(1, 100),
    activation=st.sampled_from(["tanh", "relu"]),
) | st.builds(SubnetworkSpec, family=st.just("stumps"), num_stumps=st.integers(1, 100)) | st.just(
    SubnetworkSpec("linear")
)


@settings(max_examples=200, deadline=None)
@given(specs)
def test_spec_round_trip(spec):
    import json

    assert SubnetworkSpec.from_metadata(json.loads(json.dumps(spec.to_metadata()))) == spec


@pytest.mark.parametrize("bad", [dict(depth=-1), dict(width=0), dict(num_stumps=0), dict(activation="sigmoid")])
def test_spec_invariants(bad):
    with pytest.raises(PreconditionError):
        SubnetworkSpec("mlp", **{"depth": 1, **bad})
