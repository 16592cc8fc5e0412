"""Hip-height regression from joint-derived features.

A small fully connected network (15 -> 9 -> 7 -> 5 -> 1, ReLU) written in
numpy with hand-coded backpropagation, trained full-batch with Adam and
evaluated by leave-one-out.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

HIDDEN = (9, 7, 5)
HIP_JOINT = "Illium joint"
# Tibia and fibula share the stifle-tarsal span in the twelve-joint annotation.
HIP_BONES = (
    ("Femur", ("Hip joint left", "Stifle joint left")),
    ("Tibia", ("Stifle joint left", "Tarsal joint left")),
    ("Fibula", ("Stifle joint left", "Tarsal joint left")),
)
FEATURE_NAMES = (
    ["hip_x", "hip_y", "hip_z"]
    + [f"{b[0].lower()}_length" for b in HIP_BONES]
    + [f"{b[0].lower()}_{c}" for b in HIP_BONES for c in ("dx", "dy", "dz")]
)
TARGET = "hip_height"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


# --------------------------------------------------------------------------
# Features


@dataclass(frozen=True)
class HipFeatures:
    hip: np.ndarray  # (3,)
    lengths: np.ndarray  # (3,) Femur, Tibia, Fibula
    vectors: np.ndarray  # (3, 3) one row per bone

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.hip, self.lengths, self.vectors.ravel()])


def build_features(
    joints: Mapping[str, Sequence[float]],
    hip_points: np.ndarray | None = None,
    bones: Sequence = HIP_BONES,
    hip_joint: str = HIP_JOINT,
    up_axis: int = 2,
) -> HipFeatures:
    """Hip position, bone lengths and bone vectors from named joint positions.

    When ``hip_points`` (the hip joint's nearest scan points) are given, the
    vertical hip coordinate is taken from the highest of them.
    """
    needed = [hip_joint] + [j for _, pair in bones for j in pair]
    missing = sorted({n for n in needed if n not in joints})
    if missing:
        raise KeyError(f"missing joints for hip features: {missing}")
    hip = np.array(joints[hip_joint], dtype=np.float64)
    if hip_points is not None and len(hip_points):
        hip[up_axis] = float(np.max(np.asarray(hip_points)[:, up_axis]))
    vecs = np.array([np.subtract(joints[b], joints[a]) for _, (a, b) in bones], dtype=np.float64)
    return HipFeatures(hip, np.linalg.norm(vecs, axis=1), vecs)


# --------------------------------------------------------------------------
# Network


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def check(self) -> None:
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("layer widths do not chain")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("non-finite parameters")


def init_mlp(n_in: int = 15, seed: int = 0, hidden: Sequence[int] = HIDDEN, init: str = "he") -> MlpModel:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    widths = (n_in, *hidden, 1)
    W, b = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if init == "zeros":
            W.append(np.zeros((fan_out, fan_in)))
        else:
            lim = np.sqrt(6.0 / fan_in)
            W.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
        b.append(np.zeros(fan_out))
    return MlpModel(W, b)


def _forward(model: MlpModel, X: np.ndarray):
    acts = [X]
    pre = []
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def forward(model: MlpModel, X) -> np.ndarray:
    """Network output for one feature vector (scalar) or a batch (n,)."""
    X = np.asarray(X.as_vector() if isinstance(X, HipFeatures) else X, dtype=np.float64)
    single = X.ndim == 1
    X2 = np.atleast_2d(X)
    if X2.shape[1] != model.weights[0].shape[1]:
        raise ValueError(f"expected {model.weights[0].shape[1]} features, got {X2.shape[1]}")
    out = _forward(model, X2)[1][-1][:, 0]
    return float(out[0]) if single else out


def loss_and_grads(model: MlpModel, X: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared error and its gradient for every parameter (W1, b1, W2, ...)."""
    pre, acts = _forward(model, X)
    n = len(X)
    r = acts[-1][:, 0] - y
    loss = float(np.mean(r**2))
    delta = (2.0 / n) * r[:, None]
    grads: list[np.ndarray] = []
    for i in range(len(model.weights) - 1, -1, -1):
        gW = delta.T @ acts[i]
        gb = delta.sum(axis=0)
        grads = [gW, gb] + grads
        if i > 0:
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0)
    return loss, grads


def gradient_check(model: MlpModel, X, y, step: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    _, grads = loss_and_grads(model, X, y)
    worst = 0.0
    probe = model.copy()
    for p, g in zip(probe.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss_and_grads(probe, X, y)[0]
            p[idx] = old - step
            down = loss_and_grads(probe, X, y)[0]
            p[idx] = old
            num = (up - down) / (2 * step)
            denom = max(abs(num), abs(g[idx]), 1e-8)
            worst = max(worst, abs(num - g[idx]) / denom)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    seed: int = 0
    init: str = "he"
    standardize: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("learning rate must be >= 0 and eps > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def train_adam(model: MlpModel, X, y, config: TrainConfig = TrainConfig()) -> tuple[MlpModel, list[float]]:
    """Full-batch Adam on MSE.  Returns a new model and the per-epoch loss."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) == 0:
        raise ValueError("empty training set")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite targets")
    model = model.copy()
    params = model.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = config.beta1, config.beta2
    trace = []
    for epoch in range(1, config.epochs + 1):
        loss, grads = loss_and_grads(model, X, y)
        trace.append(loss)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"loss became {loss} at epoch {epoch}", trace)
        c1 = 1 - b1**epoch
        c2 = 1 - b2**epoch
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
    return model, trace


@dataclass
class HipRegressor:
    """The network plus the feature/target standardisation it was trained with."""

    model: MlpModel
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    feature_names: tuple[str, ...] = tuple(FEATURE_NAMES)
    loss_trace: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def fit(cls, X, y, config: TrainConfig = TrainConfig(), feature_names=tuple(FEATURE_NAMES)) -> "HipRegressor":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        if config.standardize:
            xm, xs = X.mean(axis=0), X.std(axis=0)
            xs = np.where(xs > 1e-12, xs, 1.0)
            ym, ys = float(y.mean()), float(y.std())
            ys = ys if ys > 1e-12 else 1.0
        else:
            xm, xs, ym, ys = np.zeros(X.shape[1]), np.ones(X.shape[1]), 0.0, 1.0
        model = init_mlp(X.shape[1], config.seed, init=config.init)
        model, trace = train_adam(model, (X - xm) / xs, (y - ym) / ys, config)
        return cls(model, xm, xs, ym, ys, tuple(feature_names), trace)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return forward(self.model, (X - self.x_mean) / self.x_scale) * self.y_scale + self.y_mean

    def to_dict(self) -> dict:
        return {
            "widths": list(self.model.widths),
            "activation": "relu",
            "layers": [
                {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in zip(self.model.weights, self.model.biases)
            ],
            "feature_names": list(self.feature_names),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HipRegressor":
        W = [np.array(l["weights"], dtype=np.float64).reshape(l["shape"]) for l in doc["layers"]]
        b = [np.array(l["bias"], dtype=np.float64) for l in doc["layers"]]
        model = MlpModel(W, b)
        model.check()
        return cls(
            model,
            np.array(doc["x_mean"]),
            np.array(doc["x_scale"]),
            float(doc["y_mean"]),
            float(doc["y_scale"]),
            tuple(doc.get("feature_names", FEATURE_NAMES)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "HipRegressor":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# Leave-one-out


@dataclass(frozen=True)
class LooResult:
    r2: float | None  # None when the targets are constant
    rmse: float
    predictions: np.ndarray
    targets: np.ndarray


def regression_scores(y: Sequence[float], pred: Sequence[float]) -> tuple[float | None, float]:
    """(R^2, RMSE) accumulated in sample order with plain float arithmetic."""
    y = [float(v) for v in y]
    pred = [float(v) for v in pred]
    n = len(y)
    mean = sum(y) / n
    ss_res = sum((a - b) ** 2 for a, b in zip(y, pred))
    ss_tot = sum((a - mean) ** 2 for a in y)
    rmse = (ss_res / n) ** 0.5
    r2 = None if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return r2, rmse


def _fold(args):
    X, y, i, config = args
    keep = np.arange(len(y)) != i
    reg = HipRegressor.fit(X[keep], y[keep], config)
    return float(reg.predict(X[i : i + 1])[0])


def leave_one_out(X, y, config: TrainConfig = TrainConfig(), workers: int = 1) -> LooResult:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(y) < 2:
        raise ValueError("leave-one-out needs at least 2 samples")
    jobs = [(X, y, i, config) for i in range(len(y))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            preds = list(pool.map(_fold, jobs))
    else:
        preds = [_fold(j) for j in jobs]
    r2, rmse = regression_scores(y, preds)
    if r2 is None:
        logger.warning("constant targets: R^2 undefined")
    return LooResult(r2, rmse, np.array(preds), y)


# --------------------------------------------------------------------------
# Datasets


def read_dataset(path: str | Path, feature_names: Sequence[str] = FEATURE_NAMES) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read ``sample_id`` (optional), the feature columns and ``hip_height``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    cols = rows[0].keys()
    missing = [c for c in [*feature_names, TARGET] if c not in cols]
    if missing:
        raise KeyError(f"{path}: missing columns {missing}")
    ids = [r.get("sample_id") or str(i) for i, r in enumerate(rows)]
    X = np.array([[float(r[c]) for c in feature_names] for r in rows])
    y = np.array([float(r[TARGET]) for r in rows])
    return ids, X, y


def write_dataset(path: str | Path, X: np.ndarray, y: np.ndarray, ids: Sequence[str] | None = None) -> None:
    ids = ids if ids is not None else [str(i) for i in range(len(y))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", *FEATURE_NAMES, TARGET])
        for sid, row, t in zip(ids, X, y):
            w.writerow([sid, *(repr(float(v)) for v in row), repr(float(t))])


def synthetic_allometric_dataset(
    n: int = 40, seed: int = 0, slope: float = 350.0, intercept: float = 0.0, noise: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Features of randomly scaled quadruped skeletons; target = slope * femur length + noise.

    With the default slope the target is in centimetres.
    """
    from .assets import quadruped_skeleton

    rng = np.random.default_rng(seed)
    base = quadruped_skeleton()
    X, y = [], []
    for _ in range(n):
        s = rng.uniform(0.85, 1.15) * (1.0 + rng.uniform(-0.03, 0.03, 3))
        sk = base.with_positions(base.positions * s + rng.normal(0.0, 0.01, 3) * [1.0, 1.0, 0.0])
        feats = build_features({j.name: j.position for j in sk.joints})
        X.append(feats.as_vector())
        y.append(slope * feats.lengths[0] + intercept + rng.normal(0.0, noise))
    return np.array(X), np.array(y)
