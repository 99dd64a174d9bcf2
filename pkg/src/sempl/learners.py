"""Base learners: a closed-form linear surrogate and an L1-regularized ReLU
network trained by plain gradient descent, both warm-startable and
checkpointable through :class:`ParameterVector`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import ScalingRecord, fit_scaling
from .stats import mre

FORMAT_VERSION = 1


class ArchitectureError(ValueError):
    """Parameters from one architecture used where another is expected."""


class CheckpointError(ValueError):
    """A checkpoint that cannot be decoded."""


class TrainingError(ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Ordered parameter arrays plus an architecture tag.

    Two vectors are composable iff their tags are equal.
    """

    groups: tuple
    architecture: dict

    def __post_init__(self):
        groups = []
        for g in self.groups:
            a = np.array(g, dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters must be finite")
            a.setflags(write=False)
            groups.append(a)
        object.__setattr__(self, "groups", tuple(groups))
        object.__setattr__(self, "architecture", dict(self.architecture))

    def __eq__(self, other):
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return (self.architecture == other.architecture
                and len(self.groups) == len(other.groups)
                and all(a.shape == b.shape and np.array_equal(a, b)
                        for a, b in zip(self.groups, other.groups)))

    __hash__ = None

    def compatible(self, other: "ParameterVector") -> bool:
        return self.architecture == other.architecture

    def flat(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.groups]) if self.groups else np.zeros(0)

    def with_flat(self, values) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        out, pos = [], 0
        for g in self.groups:
            out.append(values[pos:pos + g.size].reshape(g.shape))
            pos += g.size
        if pos != len(values):
            raise ValueError("flat vector length does not match the parameter shapes")
        return ParameterVector(tuple(out), self.architecture)

    @property
    def weights(self):
        """Weight matrices only (no biases) for the network layout."""
        return self.groups[0::2]


@dataclass(frozen=True)
class LearnerConfig:
    hidden: tuple = (16, 16)
    learning_rate: float = 0.1
    l1: float = 0.001
    epochs: int = 200
    seed: int = 0
    batch_size: int = 256
    grid_learning_rate: Optional[tuple] = (0.01, 0.001)
    grid_l1: Optional[tuple] = (0.01, 0.1, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.l1 < 0:
            raise ValueError("l1 strength must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        for name in ("grid_learning_rate", "grid_l1"):
            grid = getattr(self, name)
            if grid is not None:
                object.__setattr__(self, name, tuple(float(v) for v in grid))

    @property
    def grid(self):
        """Candidate (learning_rate, l1) pairs; just the current pair when no grid is set."""
        lrs = self.grid_learning_rate or (self.learning_rate,)
        l1s = self.grid_l1 or (self.l1,)
        return [(lr, lam) for lr in lrs for lam in l1s]

    def without_grid(self) -> "LearnerConfig":
        return replace(self, grid_learning_rate=None, grid_l1=None)

    def to_dict(self):
        return {
            "hidden": list(self.hidden), "learning_rate": self.learning_rate, "l1": self.l1,
            "epochs": self.epochs, "seed": self.seed, "batch_size": self.batch_size,
            "grid_learning_rate": None if self.grid_learning_rate is None else list(self.grid_learning_rate),
            "grid_l1": None if self.grid_l1 is None else list(self.grid_l1),
        }

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    params: ParameterVector
    scaling: Optional[ScalingRecord] = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return int(self.params.architecture["n_features"])

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


# --------------------------------------------------------------------------
# linear surrogate

def linear_architecture(n_features):
    return {"learner": "linear", "n_features": int(n_features)}


def train_linear(X, y) -> TrainedModel:
    """Least squares with intercept.

    Solved on centered data; a singular normal matrix gets a diagonal jitter of
    ``1e-8 * trace / n_features``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("train_linear needs at least one sample and one feature")
    if len(y) != X.shape[0]:
        raise ValueError("X/y length mismatch")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc
    b = Xc.T @ (y - y_mean)
    p = A.shape[0]
    jitter = 0.0
    if np.linalg.matrix_rank(A) < p:
        tr = np.trace(A)
        jitter = 1e-8 * tr / p if tr > 0 else 1e-8
        A = A + jitter * np.eye(p)
    w = np.linalg.solve(A, b)
    intercept = y_mean - x_mean @ w
    params = ParameterVector((w, np.array(intercept)), linear_architecture(p))
    return TrainedModel(params, None, {"jitter": jitter})


# --------------------------------------------------------------------------
# network

def net_architecture(n_features, hidden):
    return {"learner": "mlp", "n_features": int(n_features),
            "layers": [int(n_features), *[int(h) for h in hidden], 1]}


def init_net(n_features, hidden, seed) -> ParameterVector:
    """Uniform weights in +-sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed & 0xFFFFFFFF)
    sizes = [n_features, *hidden, 1]
    groups = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / fan_in)
        groups.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        groups.append(np.zeros(fan_out))
    return ParameterVector(tuple(groups), net_architecture(n_features, hidden))


def _forward(groups, X):
    acts = [X]
    a = X
    n_layers = len(groups) // 2
    for i in range(n_layers):
        z = a @ groups[2 * i] + groups[2 * i + 1]
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
        acts.append(a)
    return acts


def net_loss_and_grad(groups, X, y, l1):
    """MSE + l1 * sum|W| over weight matrices, and its gradient per group."""
    acts = _forward(groups, X)
    out = acts[-1][:, 0]
    resid = out - y
    n = len(y)
    loss = float(np.mean(resid ** 2))
    if l1:
        loss += l1 * float(sum(np.abs(w).sum() for w in groups[0::2]))
    grads = [None] * len(groups)
    delta = (2.0 / n) * resid[:, None]
    n_layers = len(groups) // 2
    for i in reversed(range(n_layers)):
        W = groups[2 * i]
        grads[2 * i] = acts[i].T @ delta
        if l1:
            grads[2 * i] = grads[2 * i] + l1 * np.sign(W)
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            delta = (delta @ W.T) * (acts[i] > 0)
    return loss, grads


def _net_outputs(groups, X):
    a = X
    n_layers = len(groups) // 2
    for i in range(n_layers):
        a = a @ groups[2 * i] + groups[2 * i + 1]
        if i < n_layers - 1:
            a = np.maximum(a, 0.0)
    return a[:, 0]


def train_net(X, y, config: LearnerConfig, init: Optional[ParameterVector] = None,
              track_mre: bool = False) -> TrainedModel:
    """Fit the network by mini-batch gradient descent.

    Each step follows the mean-squared-error gradient and then soft-thresholds
    the weight matrices by ``learning_rate * l1``, the proximal form of the L1
    penalty, which sets small weights exactly to zero instead of letting them
    oscillate around it.

    Inputs and targets are max-abs scaled on this training set. Training starts
    from ``init`` when given, otherwise from a seeded random initialization.
    Batches cover the data in order when it fits in one batch, otherwise in a
    seeded shuffled order each epoch.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or len(y) == 0 or X.shape[0] != len(y):
        raise ValueError("train_net needs matching, nonempty X and y")
    arch = net_architecture(X.shape[1], config.hidden)
    if init is None:
        init = init_net(X.shape[1], config.hidden, config.seed)
    elif init.architecture != arch:
        raise ArchitectureError(
            f"initial parameters are for {init.architecture}, training needs {arch}")

    scaling = fit_scaling(X, y)
    Xs, ys = scaling.transform(X), scaling.transform_y(y)
    groups = [np.array(g) for g in init.groups]
    n = len(ys)
    bs = min(config.batch_size, n)
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 1])
    lr, lam = config.learning_rate, config.l1
    losses, mres = [], []
    for epoch in range(1, config.epochs + 1):
        if bs == n:
            batches = [slice(None)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i:i + bs] for i in range(0, n, bs)]
        epoch_loss = 0.0
        for idx in batches:
            loss, grads = net_loss_and_grad(groups, Xs[idx], ys[idx], 0.0)
            if lam:
                loss += lam * float(sum(np.abs(w).sum() for w in groups[0::2]))
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            for g, d in zip(groups, grads):
                g -= lr * d
            if lam:
                # proximal step for the L1 term: shrink weights toward 0, clip at 0
                for w in groups[0::2]:
                    np.copyto(w, np.sign(w) * np.maximum(np.abs(w) - lr * lam, 0.0))
            epoch_loss += loss
        losses.append(epoch_loss / len(batches))
        if track_mre:
            mres.append(mre(ys, _net_outputs(groups, Xs)))
    if not all(np.all(np.isfinite(g)) for g in groups):
        raise TrainingError("non-finite parameters after training", config.epochs)
    meta = {"final_loss": losses[-1] if losses else None, "epochs_run": config.epochs,
            "config": config.to_dict(), "loss_history": losses}
    if track_mre:
        meta["mre_history"] = mres
    return TrainedModel(ParameterVector(tuple(groups), arch), scaling, meta)


def epochs_to_reach(model: TrainedModel, target_mre: float) -> Optional[int]:
    """First epoch whose training MRE is at or below ``target_mre``; needs ``track_mre``."""
    for i, v in enumerate(model.metadata.get("mre_history", []), start=1):
        if v <= target_mre:
            return i
    return None


def predict(model: TrainedModel, X) -> np.ndarray:
    """Performance predictions in the original units."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(
            f"expected {model.n_features} options per configuration, got shape {X.shape}")
    learner = model.params.architecture["learner"]
    if learner == "linear":
        w, b = model.params.groups
        out = X @ w + float(b)
    elif learner == "mlp":
        out = model.scaling.inverse_y(_net_outputs(model.params.groups, model.scaling.transform(X)))
    else:
        raise ArchitectureError(f"unknown learner {learner!r}")
    return out[0] if single else out


def hyper_search(X, y, config: LearnerConfig, init: Optional[ParameterVector] = None) -> LearnerConfig:
    """Pick (learning rate, l1) from the grid by validation MRE on a seeded 2:1 split.

    Ties go to the smaller l1, then the smaller learning rate.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    candidates = config.grid
    if not candidates:
        raise ValueError("hyper-parameter grid is empty")
    if len(candidates) == 1:
        lr, lam = candidates[0]
        return replace(config, learning_rate=lr, l1=lam)
    if len(y) < 3:
        raise ValueError(f"need at least 3 samples to search hyper-parameters, got {len(y)}")
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 2])
    perm = rng.permutation(len(y))
    n_train = int(round(len(y) * 2 / 3))
    n_train = min(max(n_train, 1), len(y) - 1)
    tr, va = perm[:n_train], perm[n_train:]
    scored = []
    for lr, lam in candidates:
        cfg = replace(config, learning_rate=lr, l1=lam)
        try:
            model = train_net(X[tr], y[tr], cfg, init)
            score = mre(y[va], predict(model, X[va]))
        except TrainingError:
            score = math.inf
        scored.append((score, lam, lr))
    _, lam, lr = min(scored)
    return replace(config, learning_rate=lr, l1=lam)


# --------------------------------------------------------------------------
# checkpoints

def export_params(model: TrainedModel, extra: Optional[dict] = None) -> bytes:
    """Serialize a model to the JSON checkpoint envelope."""
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": model.params.architecture,
        "scaling": None if model.scaling is None else model.scaling.to_dict(),
        "groups": [{"shape": list(g.shape), "values": [float(v) for v in g.reshape(-1)]}
                   for g in model.params.groups],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def _decode(data) -> dict:
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError("corrupt checkpoint: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {doc['format_version']} is not supported (expected {FORMAT_VERSION})")
    for key in ("architecture", "groups"):
        if key not in doc:
            raise CheckpointError(f"corrupt checkpoint: missing {key!r}")
    return doc


def import_params(data) -> ParameterVector:
    doc = _decode(data)
    groups = []
    try:
        for g in doc["groups"]:
            shape = tuple(int(s) for s in g["shape"])
            values = np.asarray(g["values"], dtype=float)
            groups.append(values.reshape(shape))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad parameter group ({exc})") from None
    return ParameterVector(tuple(groups), doc["architecture"])


def import_model(data) -> TrainedModel:
    """Decode a checkpoint into a model; unknown top-level keys land in metadata."""
    doc = _decode(data)
    params = import_params(data)
    scaling = None if doc.get("scaling") is None else ScalingRecord.from_dict(doc["scaling"])
    if params.architecture.get("learner") == "mlp" and scaling is None:
        raise CheckpointError("corrupt checkpoint: network checkpoint without scaling")
    extra = {k: v for k, v in doc.items()
             if k not in ("format_version", "architecture", "scaling", "groups")}
    return TrainedModel(params, scaling, extra)
