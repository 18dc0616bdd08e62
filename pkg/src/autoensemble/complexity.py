"""Per-subnetwork complexity measures used as penalty coefficients.

Each measure maps a trained subnetwork and the full training set to a
finite, non-negative real. They are computed once per subnetwork after
training and then held fixed while mixture weights are fitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import PreconditionError, UnsupportedMeasureError
from .numerics import frobenius_norm
from .subnetworks import Subnetwork, input_gradient, predict_batch

MEASURES = ("rademacher_proxy", "output_variance", "jacobian_norm")


@dataclass(frozen=True)
class ComplexityReport:
    subnetwork_id: str
    measure_kind: str
    value: float
    sample_size: int

    def to_dict(self) -> dict:
        return {
            "subnetwork_id": self.subnetwork_id,
            "measure_kind": self.measure_kind,
            "value": self.value,
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ComplexityReport":
        return cls(str(d["subnetwork_id"]), str(d["measure_kind"]), float(d["value"]), int(d["sample_size"]))


def _features(data) -> np.ndarray:
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise PreconditionError("complexity needs at least one example")
    return X


def output_variance(sn: Subnetwork, data) -> float:
    """Population variance of the subnetwork's logit over the dataset.

    Uses squared deviations from the mean (the usual variance), with both
    sums taken via ``math.fsum`` so the value is independent of example order.
    """
    X = _features(data)
    h = predict_batch(sn, X)
    mean = math.fsum(h) / h.size
    return math.fsum((h - mean) ** 2) / h.size


def jacobian_norm(sn: Subnetwork, data) -> float:
    """Mean over examples of the Frobenius norm of d logit / d x."""
    if not sn.is_dense:
        raise UnsupportedMeasureError(f"jacobian_norm is undefined for {sn.spec.family} subnetworks")
    X = _features(data)
    if sn.spec.depth == 0:
        # constant Jacobian: skip the average so the value is exactly ||W0||_F
        return frobenius_norm(sn.params["W0"])
    J = input_gradient(sn, X)
    per_example = np.sqrt(np.sum(J * J, axis=1))
    return math.fsum(per_example) / X.shape[0]


def rademacher_proxy(sn: Subnetwork, data) -> float:
    """Norm-product capacity bound.

    Dense: product of layer weight Frobenius norms times the largest input
    norm, over sqrt(m). Stumps: number of fitted stumps over sqrt(m).
    """
    X = _features(data)
    m = X.shape[0]
    if not sn.is_dense:
        return sn.num_fitted_stumps / math.sqrt(m)
    prod = 1.0
    for W in sn.weight_matrices():
        prod *= frobenius_norm(W)
    max_x = float(np.max(np.sqrt(np.sum(X * X, axis=1))))
    return prod * max_x / math.sqrt(m)


_MEASURE_FNS: dict[str, Callable[[Subnetwork, object], float]] = {
    "rademacher_proxy": rademacher_proxy,
    "output_variance": output_variance,
    "jacobian_norm": jacobian_norm,
}


def register_measure(kind: str, fn: Callable[[Subnetwork, object], float]) -> None:
    """Plug in an alternative complexity measure under a new name."""
    _MEASURE_FNS[kind] = fn


def measure_supports(kind: str, family: str) -> bool:
    return not (kind == "jacobian_norm" and family == "stumps")


def compute_complexity(sn: Subnetwork, data, kind: str) -> ComplexityReport:
    try:
        fn = _MEASURE_FNS[kind]
    except KeyError:
        raise PreconditionError(f"unknown complexity measure {kind!r}") from None
    value = float(fn(sn, data))
    if not (math.isfinite(value) and value >= 0.0):
        raise PreconditionError(f"{kind} returned invalid value {value} for {sn.id}")
    return ComplexityReport(sn.id, kind, value, _features(data).shape[0])
