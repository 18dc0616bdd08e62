"""Scalar-logit base learners and the generators that propose them.

Three families are supported:

* ``linear``: ``h(x) = x W0 + b0``, zero-initialised.
* ``mlp``: ``depth`` hidden layers of ``width`` units, then a linear logit.
  A depth-0 mlp has the same functional form as ``linear`` but a random
  initialisation.
* ``stumps``: a sum of axis-aligned decision stumps grown one per training
  step by gradient boosting on the logistic loss.

Training is split into ``batch_contribution`` (sums over a slice of the
batch), ``aggregate`` (combine slices in a fixed order) and ``apply_update``,
so a replicated cluster can shard a batch and still apply the same update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EvaluationError, PreconditionError, ShapeError, TrainingError
from .numerics import matmul

FAMILIES = ("linear", "mlp", "stumps")
ACTIVATIONS = ("tanh", "relu")

_STUMP_KEYS = ("feature", "threshold", "left", "right")


@dataclass(frozen=True)
class SubnetworkSpec:
    """Architecture of one subnetwork; fields unused by a family keep defaults."""

    family: str
    depth: int = 0
    width: int = 1
    num_stumps: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PreconditionError(f"unknown family {self.family!r}")
        if self.depth < 0 or self.width < 1 or self.num_stumps < 1:
            raise PreconditionError(f"invalid architecture {self}")
        if self.family == "linear" and self.depth != 0:
            raise PreconditionError("linear subnetworks have depth 0")
        if self.activation not in ACTIVATIONS:
            raise PreconditionError(f"unknown activation {self.activation!r}")

    def to_metadata(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "width": self.width,
            "num_stumps": self.num_stumps,
            "activation": self.activation,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "SubnetworkSpec":
        return cls(
            family=str(meta["family"]),
            depth=int(meta["depth"]),
            width=int(meta["width"]),
            num_stumps=int(meta["num_stumps"]),
            activation=str(meta["activation"]),
        )


@dataclass(frozen=True)
class Subnetwork:
    id: str
    spec: SubnetworkSpec
    input_dim: int
    params: dict = field(repr=False)
    train_steps_done: int = 0
    iteration: int = 0

    def metadata(self) -> dict:
        """Architecture metadata: the spec fields plus identity and progress."""
        meta = self.spec.to_metadata()
        meta.update(
            id=self.id,
            input_dim=self.input_dim,
            iteration=self.iteration,
            train_steps_done=self.train_steps_done,
        )
        return meta

    @property
    def num_layers(self) -> int:
        """Number of weight matrices (dense families only)."""
        return self.spec.depth + 1

    def weight_matrices(self) -> list[np.ndarray]:
        return [self.params[f"W{i}"] for i in range(self.num_layers)]

    @property
    def is_dense(self) -> bool:
        return self.spec.family != "stumps"

    @property
    def num_fitted_stumps(self) -> int:
        return int(self.params["feature"].shape[0])


def param_shapes(spec: SubnetworkSpec, input_dim: int) -> dict[str, tuple]:
    """Parameter names and shapes at construction, in canonical order."""
    if spec.family == "stumps":
        return {k: (0,) for k in _STUMP_KEYS}
    shapes = {}
    fan_in = input_dim
    for i in range(spec.depth):
        shapes[f"W{i}"] = (fan_in, spec.width)
        shapes[f"b{i}"] = (spec.width,)
        fan_in = spec.width
    shapes[f"W{spec.depth}"] = (fan_in, 1)
    shapes[f"b{spec.depth}"] = (1,)
    return shapes


def init_subnetwork(
    spec: SubnetworkSpec,
    input_dim: int,
    id: str,
    rng: np.random.Generator,
    iteration: int = 0,
) -> Subnetwork:
    """Fresh subnetwork: zero weights for linear/stumps, scaled uniform for mlp."""
    if input_dim < 1:
        raise PreconditionError("input_dim must be >= 1")
    params = {}
    for name, shape in param_shapes(spec, input_dim).items():
        if spec.family == "mlp" and name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape, dtype=np.float64)
    return Subnetwork(id, spec, input_dim, _freeze(params), 0, iteration)


def from_metadata(meta: dict, params: dict) -> Subnetwork:
    """Rebuild a subnetwork from its metadata and a parameter mapping."""
    spec = SubnetworkSpec.from_metadata(meta)
    expected = param_shapes(spec, int(meta["input_dim"]))
    if set(params) != set(expected):
        raise ShapeError(f"parameters {sorted(params)} do not match {spec}")
    ordered = {k: np.asarray(params[k], dtype=np.float64) for k in expected}
    return Subnetwork(
        id=str(meta["id"]),
        spec=spec,
        input_dim=int(meta["input_dim"]),
        params=_freeze(ordered),
        train_steps_done=int(meta["train_steps_done"]),
        iteration=int(meta["iteration"]),
    )


def _freeze(params: dict) -> dict:
    for v in params.values():
        v.setflags(write=False)
    return params


def _activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(name: str, a: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - a * a
    return (a > 0.0).astype(np.float64)


def _check_input(sn: Subnetwork, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != sn.input_dim:
        raise ShapeError(f"subnetwork {sn.id} expects {sn.input_dim} features, got shape {X.shape}")
    return X


def _dense_forward(sn: Subnetwork, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [X]
    a = X
    for i in range(sn.spec.depth):
        a = _activation(sn.spec.activation, matmul(a, sn.params[f"W{i}"]) + sn.params[f"b{i}"])
        acts.append(a)
    L = sn.spec.depth
    z = (matmul(a, sn.params[f"W{L}"]) + sn.params[f"b{L}"]).reshape(-1)
    return z, acts


def _stumps_forward(sn: Subnetwork, X: np.ndarray) -> np.ndarray:
    out = np.zeros(X.shape[0])
    p = sn.params
    for f, t, lv, rv in zip(p["feature"], p["threshold"], p["left"], p["right"]):
        out = out + np.where(X[:, int(f)] <= t, lv, rv)
    return out


def predict_batch(sn: Subnetwork, X) -> np.ndarray:
    """Logits for every row of ``X``; row results do not depend on batch size."""
    X = _check_input(sn, X)
    if sn.is_dense:
        return _dense_forward(sn, X)[0]
    return _stumps_forward(sn, X)


def predict(sn: Subnetwork, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"predict expects a feature vector, got shape {x.shape}")
    return float(predict_batch(sn, x)[0])


def logistic_loss(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example ``log(1 + exp(-y z))``."""
    return np.logaddexp(0.0, -y * z)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -u))


@dataclass
class Contribution:
    """Loss and gradient statistics summed over a slice of a batch.

    Dense families fill ``grads`` with summed parameter gradients. Stumps keep
    the raw rows with their negative gradients and hessians, because the split
    search needs every example.
    """

    count: int
    loss_sum: float
    grads: Optional[dict] = None
    rows: Optional[np.ndarray] = None
    neg_grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None


def batch_contribution(sn: Subnetwork, X, y) -> Contribution:
    """Summed loss and gradient statistics; non-finite forward passes raise ``TrainingError``."""
    try:
        return _batch_contribution(sn, X, y)
    except EvaluationError as exc:
        raise TrainingError(f"{sn.id}: {exc}") from None


def diverged_contribution(sn: Subnetwork, count: int) -> Contribution:
    """Placeholder statistics for a slice whose forward pass blew up."""
    if sn.is_dense:
        return Contribution(count, math.inf, grads={k: np.zeros_like(v) for k, v in sn.params.items()})
    empty = np.zeros((0, sn.input_dim))
    return Contribution(count, math.inf, rows=empty, neg_grad=np.zeros(0), hess=np.zeros(0))


def _batch_contribution(sn: Subnetwork, X, y) -> Contribution:
    X = _check_input(sn, X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] == 0:
        return Contribution(0, 0.0)
    if sn.is_dense:
        z, acts = _dense_forward(sn, X)
        loss_sum = float(np.sum(logistic_loss(z, y)))
        delta = (-y * _sigmoid(-y * z))[:, None]
        grads = {}
        for i in range(sn.spec.depth, -1, -1):
            grads[f"W{i}"] = matmul(acts[i].T, delta)
            grads[f"b{i}"] = np.sum(delta, axis=0)
            if i > 0:
                delta = matmul(delta, sn.params[f"W{i}"].T) * _activation_grad(
                    sn.spec.activation, acts[i]
                )
        return Contribution(X.shape[0], loss_sum, grads={k: grads[k] for k in sn.params})
    z = _stumps_forward(sn, X)
    p = _sigmoid(z)
    return Contribution(
        X.shape[0],
        float(np.sum(logistic_loss(z, y))),
        rows=X,
        neg_grad=y * _sigmoid(-y * z),
        hess=p * (1.0 - p),
    )


def aggregate(contributions: Sequence[Contribution]) -> Contribution:
    """Combine slice statistics left to right; a single slice is returned as-is."""
    parts = [c for c in contributions if c.count > 0]
    if not parts:
        raise PreconditionError("cannot aggregate an empty batch")
    if len(parts) == 1:
        return parts[0]
    total = parts[0]
    for c in parts[1:]:
        if total.grads is not None:
            grads = {k: total.grads[k] + c.grads[k] for k in total.grads}
            total = Contribution(total.count + c.count, total.loss_sum + c.loss_sum, grads=grads)
        else:
            total = Contribution(
                total.count + c.count,
                total.loss_sum + c.loss_sum,
                rows=np.concatenate([total.rows, c.rows]),
                neg_grad=np.concatenate([total.neg_grad, c.neg_grad]),
                hess=np.concatenate([total.hess, c.hess]),
            )
    return total


def best_stump_split(X: np.ndarray, residual: np.ndarray) -> tuple[int, float]:
    """Exhaustive scan over every feature and every midpoint between distinct values.

    Returns the ``(feature, threshold)`` maximising the squared-error reduction
    when fitting ``residual`` with one constant per side. Ties go to the lowest
    feature, then the lowest threshold. Without any valid split the stump puts
    everything on the left of feature 0.
    """
    best_gain, best = -np.inf, None
    n = X.shape[0]
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], residual[order]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if valid.size == 0:
            continue
        cum = np.cumsum(rs)
        total = cum[-1]
        n_left = valid + 1.0
        s_left = cum[valid]
        gain = s_left**2 / n_left + (total - s_left) ** 2 / (n - n_left)
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            best_gain = gain[k]
            pos = valid[k]
            best = (j, 0.5 * (xs[pos] + xs[pos + 1]))
    if best is None:
        return 0, float(np.max(X[:, 0]))
    return best[0], float(best[1])


def _fit_stump(sn: Subnetwork, agg: Contribution, lr: float) -> Subnetwork:
    f, thr = best_stump_split(agg.rows, agg.neg_grad)
    left = agg.rows[:, f] <= thr

    def leaf(mask):
        if not np.any(mask):
            return 0.0
        return lr * float(np.sum(agg.neg_grad[mask])) / max(float(np.sum(agg.hess[mask])), 1e-12)

    lv = leaf(left)
    rv = leaf(~left) if np.any(~left) else lv
    p = sn.params
    new = {
        "feature": np.append(p["feature"], float(f)),
        "threshold": np.append(p["threshold"], thr),
        "left": np.append(p["left"], lv),
        "right": np.append(p["right"], rv),
    }
    return replace(sn, params=_freeze(new))


def apply_update(sn: Subnetwork, agg: Contribution, lr: float) -> Subnetwork:
    """One optimisation step from aggregated batch statistics."""
    if not lr > 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    if sn.is_dense:
        scale = lr / agg.count
        new = {k: v - scale * agg.grads[k] for k, v in sn.params.items()}
        if not all(np.all(np.isfinite(v)) for v in new.values()):
            raise TrainingError(f"{sn.id}: parameters became non-finite")
        return replace(sn, params=_freeze(new), train_steps_done=sn.train_steps_done + 1)
    if sn.num_fitted_stumps >= sn.spec.num_stumps:
        return replace(sn, train_steps_done=sn.train_steps_done + 1)
    fitted = _fit_stump(sn, agg, lr)
    return replace(fitted, train_steps_done=sn.train_steps_done + 1)


def train_step(sn: Subnetwork, X, y, lr: float) -> tuple[Subnetwork, float]:
    """One training step on a batch; returns the updated model and pre-update mean loss.

    Dense families take an SGD step on the mean logistic loss. Stumps add one
    stump fitted to the loss's negative gradient, with Newton leaf values
    shrunk by ``lr``, until ``spec.num_stumps`` stumps exist.
    """
    if not lr > 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    if len(y) == 0:
        raise PreconditionError("training batch is empty")
    agg = batch_contribution(sn, X, y)
    loss = agg.loss_sum / agg.count
    if not math.isfinite(loss):
        raise TrainingError(f"{sn.id}: non-finite batch loss")
    return apply_update(sn, agg, lr), loss


def mean_loss_and_grads(sn: Subnetwork, X, y) -> tuple[float, dict]:
    """Mean logistic loss and its analytic parameter gradient (dense only)."""
    if not sn.is_dense:
        raise PreconditionError("stumps have no parameter gradient")
    c = batch_contribution(sn, X, y)
    return c.loss_sum / c.count, {k: g / c.count for k, g in c.grads.items()}


def flatten_params(sn: Subnetwork) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in sn.params.values()])


def with_flat_params(sn: Subnetwork, flat: np.ndarray) -> Subnetwork:
    out, pos = {}, 0
    for k, v in sn.params.items():
        out[k] = np.array(flat[pos : pos + v.size], dtype=np.float64).reshape(v.shape)
        pos += v.size
    return replace(sn, params=_freeze(out))


def input_gradient(sn: Subnetwork, X) -> np.ndarray:
    """d logit / d x for every row of ``X`` (dense families only)."""
    if not sn.is_dense:
        raise PreconditionError("stumps are not differentiable")
    X = _check_input(sn, X)
    _, acts = _dense_forward(sn, X)
    L = sn.spec.depth
    delta = np.broadcast_to(sn.params[f"W{L}"].T, (X.shape[0], sn.params[f"W{L}"].shape[0]))
    for i in range(L - 1, -1, -1):
        delta = delta * _activation_grad(sn.spec.activation, acts[i + 1])
        delta = matmul(delta, sn.params[f"W{i}"].T)
    return np.array(delta)


def scale_weights(sn: Subnetwork, factor: float) -> Subnetwork:
    """Multiply every weight matrix by ``factor`` (biases untouched)."""
    new = {k: (v * factor if k.startswith("W") else v.copy()) for k, v in sn.params.items()}
    return replace(sn, params=_freeze(new))


@dataclass(frozen=True)
class GeneratorConfig:
    """``grow`` deepens mlps adaptively; ``pool`` proposes a fixed linear/mlp/stumps set."""

    kind: str = "grow"
    width: int = 8
    mlp_depth: int = 1
    num_stumps: int = 20
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("grow", "pool"):
            raise PreconditionError(f"unknown generator {self.kind!r}")


def deepest_dense_depth(previous_best) -> Optional[int]:
    """Depth of the deepest linear/mlp member in ensemble metadata, if any."""
    if previous_best is None:
        return None
    members = previous_best["subnetworks"] if isinstance(previous_best, dict) else previous_best
    depths = [int(m["depth"]) for m in members if m["family"] in ("linear", "mlp")]
    return max(depths) if depths else None


def generate_candidates(
    cfg: GeneratorConfig, previous_best, iteration: int
) -> list[SubnetworkSpec]:
    """New subnetwork architectures for ``iteration``, adapted to the previous best."""
    if iteration < 0:
        raise PreconditionError("iteration must be >= 0")
    if cfg.kind == "pool":
        return [
            SubnetworkSpec("linear"),
            SubnetworkSpec("mlp", cfg.mlp_depth, cfg.width, activation=cfg.activation),
            SubnetworkSpec("stumps", num_stumps=cfg.num_stumps),
        ]
    depth = deepest_dense_depth(previous_best)
    if iteration == 0 or depth is None:
        depth = 0
    return [
        SubnetworkSpec("mlp", depth, cfg.width, activation=cfg.activation),
        SubnetworkSpec("mlp", depth + 1, cfg.width, activation=cfg.activation),
    ]


def subnetwork_id(spec: SubnetworkSpec, iteration: int) -> str:
    if spec.family == "mlp":
        return f"t{iteration}_mlp_d{spec.depth}"
    return f"t{iteration}_{spec.family}"
