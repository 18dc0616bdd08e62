import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autoensemble.complexity import (
    ComplexityReport,
    compute_complexity,
    jacobian_norm,
    output_variance,
    rademacher_proxy,
    register_measure,
)
from autoensemble.data import Dataset
from autoensemble.errors import PreconditionError, UnsupportedMeasureError
from autoensemble.numerics import finite_diff_gradient, make_rng
from autoensemble.subnetworks import (
    SubnetworkSpec,
    flatten_params,
    init_subnetwork,
    predict,
    predict_batch,
    scale_weights,
    with_flat_params,
)

from test_subnetworks import linear, mlp, stumps


def const_net(d=1, bias=0.0):
    return linear(np.zeros(d), bias)


def identity_net():
    return linear([1.0])


def test_variance_examples():
    assert output_variance(const_net(bias=1.0), np.zeros((3, 1))) == 0.0
    assert output_variance(identity_net(), np.array([[0.0], [2.0]])) == 1.0


def _two_pass(h):
    mean = sum(h) / len(h)
    return sum((v - mean) ** 2 for v in h) / len(h)


@pytest.mark.parametrize("seed", range(10))
def test_variance_matches_two_pass(seed):
    sn = mlp(2, seed=seed)
    X = np.random.default_rng(seed).standard_normal((40, 3))
    h = [predict(sn, x) for x in X]
    assert abs(output_variance(sn, X) - _two_pass(h)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_variance_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    sn = mlp(1, seed=seed % 7)
    X = rng.standard_normal((30, 3)) * 10
    assert output_variance(sn, X) == output_variance(sn, X[rng.permutation(30)])


def test_jacobian_examples():
    assert jacobian_norm(linear([3, 4]), np.random.default_rng(0).standard_normal((5, 2))) == 5.0
    sn = mlp(2)
    zero = with_flat_params(sn, np.zeros(flatten_params(sn).size))
    assert jacobian_norm(zero, np.ones((4, 3))) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_jacobian_matches_finite_differences(seed):
    sn = mlp(1 + seed % 3, width=6, seed=seed)
    X = np.random.default_rng(seed).standard_normal((6, 3))
    norms = []
    for x in X:
        J = finite_diff_gradient(lambda v: predict(sn, v), x)
        norms.append(np.linalg.norm(J))
    oracle = float(np.mean(norms))
    assert abs(jacobian_norm(sn, X) - oracle) / oracle <= 1e-4


def test_jacobian_rejects_stumps():
    with pytest.raises(UnsupportedMeasureError):
        jacobian_norm(stumps([0], [0.0], [1.0], [-1.0]), np.zeros((2, 2)))


def test_rademacher_examples():
    assert rademacher_proxy(linear([0.0, 0.0]), np.ones((3, 2))) == 0.0
    X = np.zeros((25, 2))
    X[0] = [0.6, 0.8]
    assert rademacher_proxy(linear([3, 4]), X) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("depth", [0, 1, 3])
def test_rademacher_homogeneity(depth):
    sn = mlp(depth, seed=depth)
    X = np.random.default_rng(1).standard_normal((10, 3))
    L = depth + 1
    assert rademacher_proxy(scale_weights(sn, 2.0), X) == pytest.approx(2**L * rademacher_proxy(sn, X), rel=1e-14)


def test_rademacher_stumps_counts_fitted():
    sn = stumps([0, 1], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0])
    assert rademacher_proxy(sn, np.zeros((16, 2))) == 0.5


@pytest.mark.parametrize("family", ["linear", "mlp"])
def test_zero_network_has_zero_complexity(family):
    spec = SubnetworkSpec(family, 0 if family == "linear" else 2, 4)
    sn = init_subnetwork(spec, 3, "z", make_rng(0))
    sn = with_flat_params(sn, np.zeros(flatten_params(sn).size))
    X = np.random.default_rng(0).standard_normal((8, 3))
    for kind in ("rademacher_proxy", "output_variance", "jacobian_norm"):
        assert compute_complexity(sn, X, kind).value == 0.0


def test_empty_stumps_zero_complexity():
    sn = init_subnetwork(SubnetworkSpec("stumps", num_stumps=5), 2, "s", make_rng(0))
    X = np.ones((4, 2))
    assert compute_complexity(sn, X, "rademacher_proxy").value == 0.0
    assert compute_complexity(sn, X, "output_variance").value == 0.0


def test_report_is_deterministic_and_round_trips():
    sn = mlp(2, seed=9)
    data = Dataset(np.random.default_rng(2).standard_normal((20, 3)), np.ones(20))
    a = compute_complexity(sn, data, "jacobian_norm")
    assert a == compute_complexity(sn, data, "jacobian_norm")
    assert a.sample_size == 20
    assert ComplexityReport.from_dict(a.to_dict()) == a


def test_empty_data_and_unknown_measure():
    with pytest.raises(PreconditionError):
        output_variance(identity_net(), np.zeros((0, 1)))
    with pytest.raises(PreconditionError):
        compute_complexity(identity_net(), np.zeros((1, 1)), "nope")


def test_register_measure():
    register_measure("abs_mean", lambda sn, X: float(np.mean(np.abs(predict_batch(sn, X)))))
    rep = compute_complexity(identity_net(), np.array([[-1.0], [3.0]]), "abs_mean")
    assert rep.value == 2.0
