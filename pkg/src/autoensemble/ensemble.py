"""Weighted ensembles of subnetworks and the complexity-regularized ensembler.

An ensemble predicts ``f(x) = sum_k w_k h_k(x)``. Mixture weights are fitted
by minimising

    F(w) = (1/m) sum_i Phi(1 - y_i sum_j w_j h_j(x_i)) + sum_j (lam * r_j + beta) |w_j|

with proximal gradient descent: a gradient step on the smooth first term,
then soft-thresholding of each coordinate by ``step * (lam * r_j + beta)``.
A subnetwork whose penalty outweighs its contribution to the loss is driven
to exactly zero weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .complexity import MEASURES, ComplexityReport
from .errors import OptimizationError, PreconditionError, ShapeError
from .subnetworks import Subnetwork, predict_batch

log = logging.getLogger(__name__)

SURROGATES = ("exp", "logistic")

# Beyond this argument the exponential surrogate continues linearly, which
# keeps it finite, convex and non-decreasing.
EXP_CAP = 50.0
_LN2 = math.log(2.0)


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.01
    beta: float = 0.001
    surrogate: str = "exp"
    measure: str = "rademacher_proxy"
    rho: float = 0.1
    max_prox_steps: int = 500
    tol: float = 1e-10

    def __post_init__(self):
        if not (self.lam >= 0 and self.beta >= 0):
            raise PreconditionError("lambda and beta must be >= 0")
        if self.surrogate not in SURROGATES:
            raise PreconditionError(f"unknown surrogate {self.surrogate!r}")
        if self.measure not in MEASURES:
            raise PreconditionError(f"unknown complexity measure {self.measure!r}")
        if not 0 < self.rho <= 1:
            raise PreconditionError(f"rho must lie in (0, 1], got {self.rho}")
        if self.max_prox_steps < 1 or not self.tol > 0:
            raise PreconditionError("max_prox_steps must be >= 1 and tol > 0")


def surrogate(kind: str, u) -> np.ndarray:
    """Vectorised surrogate loss Phi(u), convex and non-decreasing in ``u``.

    ``exp``: ``e^(u-1)``, so ``Phi(1 - y f) = e^(-y f)`` as in AdaBoost.
    ``logistic``: ``log2(1 + e^(u-1))``.
    """
    u = np.asarray(u, dtype=np.float64)
    if kind == "exp":
        capped = np.minimum(u, EXP_CAP)
        base = np.exp(capped - 1.0)
        return np.where(u > EXP_CAP, base * (1.0 + (u - EXP_CAP)), base)
    if kind == "logistic":
        return np.logaddexp(0.0, u - 1.0) / _LN2
    raise PreconditionError(f"unknown surrogate {kind!r}")


def surrogate_derivative(kind: str, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if kind == "exp":
        return np.exp(np.minimum(u, EXP_CAP) - 1.0)
    if kind == "logistic":
        return np.exp(-np.logaddexp(0.0, 1.0 - u)) / _LN2
    raise PreconditionError(f"unknown surrogate {kind!r}")


def saturated_count(kind: str, u) -> int:
    """How many arguments fell in the linear tail of the exponential surrogate."""
    if kind != "exp":
        return 0
    return int(np.sum(np.asarray(u) > EXP_CAP))


def surrogate_value(kind: str, u: float) -> float:
    if not math.isfinite(u):
        raise PreconditionError("surrogate argument must be finite")
    if saturated_count(kind, u):
        log.warning("surrogate saturated at u=%g (cap %g)", u, EXP_CAP)
    return float(surrogate(kind, u))


def uniform_weights(l: int) -> np.ndarray:
    if l < 1:
        raise PreconditionError("a uniform ensemble needs at least one subnetwork")
    return np.full(l, 1.0 / l)


def combine(logits: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``sum_k w_k * logits[:, k]``, accumulated in column order."""
    f = np.zeros(logits.shape[0])
    for k in range(logits.shape[1]):
        f = f + w[k] * logits[:, k]
    return f


def _check_problem(w, logits, labels, r) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be m x N, got shape {logits.shape}")
    m, n = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match {m} examples")
    if w.shape != (n,) or r.shape != (n,):
        raise ShapeError(f"weights {w.shape} / complexities {r.shape} do not match N={n}")
    return w, logits, labels, r


def _smooth_value(w, logits, labels, kind) -> float:
    u = 1.0 - labels * combine(logits, w)
    return math.fsum(surrogate(kind, u)) / logits.shape[0]


def penalty_coefficients(r: np.ndarray, cfg: ObjectiveConfig) -> np.ndarray:
    return cfg.lam * np.asarray(r, dtype=np.float64) + cfg.beta


def _penalty(w, coef) -> float:
    return math.fsum(coef * np.abs(w))


def objective(w, logits, labels, cfg: ObjectiveConfig, r) -> float:
    """Exact value of F(w)."""
    w, logits, labels, r = _check_problem(w, logits, labels, r)
    return _smooth_value(w, logits, labels, cfg.surrogate) + _penalty(w, penalty_coefficients(r, cfg))


def smooth_gradient(w, logits, labels, kind: str) -> np.ndarray:
    """Gradient of the empirical (smooth) term of F with respect to ``w``."""
    w = np.asarray(w, dtype=np.float64)
    m = logits.shape[0]
    u = 1.0 - labels * combine(logits, w)
    coef = -labels * surrogate_derivative(kind, u)
    return np.array([math.fsum(coef * logits[:, j]) / m for j in range(logits.shape[1])])


def soft_threshold(z, thresh) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - thresh, 0.0)


@dataclass
class FitResult:
    weights: np.ndarray
    trace: list[float]
    converged: bool
    saturated: int = 0


def fit_mixture_weights(
    logits,
    labels,
    cfg: ObjectiveConfig,
    r,
    w0=None,
    initial_step: float = 1.0,
) -> FitResult:
    """Proximal gradient descent with backtracking on F(w).

    A step is accepted only when the usual quadratic upper bound holds for the
    smooth term and F does not increase, so ``trace`` is non-increasing.
    Stops when an accepted step changes F by at most ``cfg.tol``, when no
    decreasing step exists, or after ``cfg.max_prox_steps`` steps.
    """
    n = np.asarray(logits).shape[1] if np.asarray(logits).ndim == 2 else -1
    w = np.zeros(n) if w0 is None else np.array(w0, dtype=np.float64)
    w, logits, labels, r = _check_problem(w, logits, labels, r)
    kind = cfg.surrogate
    coef = penalty_coefficients(r, cfg)
    smooth = _smooth_value(w, logits, labels, kind)
    F = smooth + _penalty(w, coef)
    if not math.isfinite(F):
        raise PreconditionError("F(w0) is not finite")
    trace = [F]
    step = initial_step
    converged = False
    for _ in range(cfg.max_prox_steps):
        g = smooth_gradient(w, logits, labels, kind)
        if not np.all(np.isfinite(g)):
            raise OptimizationError("non-finite gradient in mixture-weight fit")
        accepted = False
        while step > 1e-30:
            w_new = soft_threshold(w - step * g, step * coef)
            d = w_new - w
            if not np.any(d):
                break
            smooth_new = _smooth_value(w_new, logits, labels, kind)
            F_new = smooth_new + _penalty(w_new, coef)
            bound = smooth + float(np.dot(g, d)) + float(np.dot(d, d)) / (2.0 * step)
            if math.isfinite(F_new) and smooth_new <= bound and F_new <= F:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        delta = F - F_new
        w, smooth, F = w_new, smooth_new, F_new
        trace.append(F)
        step *= 2.0
        if delta <= cfg.tol:
            converged = True
            break
    sat = saturated_count(kind, 1.0 - labels * combine(logits, w))
    if sat:
        log.warning("%d margins saturated the exponential surrogate", sat)
    return FitResult(w, trace, converged, sat)


def margin_error(f, labels, rho: float) -> float:
    """Fraction of examples with ``y * f(x) <= rho``."""
    if not 0 < rho <= 1:
        raise PreconditionError(f"rho must lie in (0, 1], got {rho}")
    f = np.asarray(f, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.count_nonzero(labels * f <= rho)) / f.size


@dataclass(frozen=True)
class EnsembleModel:
    subnetworks: tuple[Subnetwork, ...]
    weights: np.ndarray
    objective_value: float = float("nan")
    complexity_reports: tuple[ComplexityReport, ...] = field(default=())
    candidate_id: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.subnetworks),) or len(self.subnetworks) < 1:
            raise ShapeError("an ensemble needs one finite weight per subnetwork")
        if not np.all(np.isfinite(w)):
            raise ShapeError("mixture weights must be finite")
        object.__setattr__(self, "subnetworks", tuple(self.subnetworks))
        object.__setattr__(self, "complexity_reports", tuple(self.complexity_reports))
        object.__setattr__(self, "weights", w)

    @property
    def ids(self) -> list[str]:
        return [sn.id for sn in self.subnetworks]

    @property
    def l1_norm(self) -> float:
        return math.fsum(np.abs(self.weights))

    def report_for(self, sn_id: str) -> Optional[ComplexityReport]:
        for rep in self.complexity_reports:
            if rep.subnetwork_id == sn_id:
                return rep
        return None

    def complexities(self) -> np.ndarray:
        vals = []
        for sn in self.subnetworks:
            rep = self.report_for(sn.id)
            if rep is None:
                raise PreconditionError(f"no complexity report for subnetwork {sn.id}")
            vals.append(rep.value)
        return np.array(vals)

    def metadata(self) -> dict:
        """Architecture metadata; weights and parameters live in the binary blob."""
        return {
            "candidate_id": self.candidate_id,
            "objective_value": self.objective_value,
            "subnetworks": [sn.metadata() for sn in self.subnetworks],
            "complexity_reports": [r.to_dict() for r in self.complexity_reports],
        }

    def deepest_depth(self) -> int:
        depths = [sn.spec.depth for sn in self.subnetworks if sn.is_dense]
        return max(depths) if depths else 0


def subnetwork_logits(subnetworks: Sequence[Subnetwork], X) -> np.ndarray:
    """m x N matrix of every subnetwork's logits."""
    return np.column_stack([predict_batch(sn, X) for sn in subnetworks])


def ensemble_logits(ens: EnsembleModel, X) -> np.ndarray:
    return combine(subnetwork_logits(ens.subnetworks, X), ens.weights)


def predict_ensemble(ens: EnsembleModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(ensemble_logits(ens, x[None, :] if x.ndim == 1 else x)[0])


def accuracy(f, labels) -> float:
    """Share of examples whose logit sign matches the label; a zero logit predicts +1."""
    pred = np.where(np.asarray(f) >= 0.0, 1.0, -1.0)
    return float(np.count_nonzero(pred == np.asarray(labels))) / len(labels)


@dataclass(frozen=True)
class BoundReport:
    empirical_margin_error: float
    complexity_term: float
    slack_term: float
    total: float


def deepboost_bound(ens: EnsembleModel, data, cfg: ObjectiveConfig) -> BoundReport:
    """Margin-based generalization bound for ``ens`` on ``data``.

    ``complexity_term = (4/rho) * sum_k |w_k| r_k`` with the configured measure
    standing in for each subnetwork's Rademacher complexity, and
    ``slack_term = (1/rho) * sqrt(log(l) / m)`` with the unknown constants set
    to 1. The slack is diagnostic only.
    """
    r = ens.complexities()
    f = ensemble_logits(ens, data.X)
    emp = margin_error(f, data.y, cfg.rho)
    comp = (4.0 / cfg.rho) * math.fsum(np.abs(ens.weights) * r)
    l = len(ens.subnetworks)
    slack = (1.0 / cfg.rho) * math.sqrt(math.log(l) / data.m)
    return BoundReport(emp, comp, slack, emp + comp + slack)
