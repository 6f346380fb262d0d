"""Deterministic toy trainer for the masked soft-F1 loss.

A sigmoid-output linear model stands in for a vision backbone.  Gradients of
the loss with respect to probabilities come from :mod:`aumask.loss` and are
chained through the sigmoid and the linear layer by hand; unknown labels
contribute exactly zero gradient, so they never move a parameter.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .labelstore import UNKNOWN, LabelMatrix, PredictionMatrix
from .loss import EmptyBatchError, SoftF1Config, soft_f1_loss

log = logging.getLogger(__name__)

MODEL_FORMAT = "aumask-linear-model"
MODEL_VERSION = 1

# The reference synthetic task needs a larger step than the 1e-4 default:
# with AMSGrad each weight moves at most ~lr per update, and 30 epochs of
# 256-sample batches over 1600 rows is only 210 updates.
DEMO_LEARNING_RATE = 0.1


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    # Philox is counter based; ``stream`` selects an independent key.
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ToyModel:
    class_names: tuple[str, ...]
    weights: np.ndarray  # features x classes
    bias: np.ndarray  # classes

    @classmethod
    def zeros(cls, n_features: int, class_names: Sequence[str]) -> ToyModel:
        k = len(class_names)
        return cls(tuple(class_names), np.zeros((n_features, k)), np.zeros(k))

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> ToyModel:
        return ToyModel(self.class_names, self.weights.copy(), self.bias.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "class_names": list(self.class_names),
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ToyModel:
        if data.get("format") != MODEL_FORMAT or data.get("version") != MODEL_VERSION:
            raise ValueError("not a version 1 linear model document")
        names = tuple(data["class_names"])
        weights = np.array(data["weights"], dtype=np.float64).reshape(-1, len(names))
        return cls(names, weights, np.array(data["bias"], dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> ToyModel:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def predict(model: ToyModel, features: np.ndarray) -> PredictionMatrix:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.n_features:
        raise ValueError(
            f"features have shape {features.shape}, model expects (n, {model.n_features})"
        )
    return PredictionMatrix(model.class_names, sigmoid(model.logits(features)))


def loss_and_parameter_gradients(
    model: ToyModel, features: np.ndarray, labels: np.ndarray, config: SoftF1Config
):
    """Soft-F1 loss of a batch and its gradients for weights and bias."""
    p = sigmoid(model.logits(features))
    result = soft_f1_loss(p, labels, config)
    dz = result.gradient * p * (1.0 - p)
    return result, features.T @ dz, dz.sum(axis=0)


class AMSGrad:
    """Adam with the running maximum of the second moment in the denominator."""

    def __init__(self, shapes, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.v_max = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        lr_t = self.lr * np.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        for p, g, m, v, vmax in zip(params, grads, self.m, self.v, self.v_max):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            np.maximum(vmax, v, out=vmax)
            p -= lr_t * m / (np.sqrt(vmax) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    threshold: float = 0.5
    validation_fraction: float = 0.2
    loss: SoftF1Config = field(default_factory=SoftF1Config)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    skipped_batches: int
    validation: metrics.MetricReport

    @property
    def selection_score(self) -> float:
        return self.validation.selection_score

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "skipped_batches": self.skipped_batches,
            "validation": self.validation.to_dict(),
            "selection_score": self.selection_score,
        }


@dataclass
class TrainReport:
    config: TrainConfig
    history: list[EpochRecord]
    best_epoch: int | None
    best_model: ToyModel
    final_model: ToyModel

    @property
    def best(self) -> EpochRecord | None:
        if self.best_epoch is None:
            return None
        return self.history[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "history": [e.to_dict() for e in self.history],
            "best_epoch": self.best_epoch,
            "best_model": self.best_model.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def synth_dataset(
    seed: int,
    samples: int = 2000,
    features: int = 10,
    classes: int = 4,
    missingness: float = 0.5,
    noise: float = 0.02,
) -> tuple[np.ndarray, LabelMatrix]:
    """Multi-label data from random per-class hyperplanes.

    Features are standard normal; class ``c`` is displayed where
    ``x . w_c + b_c > 0``.  A ``noise`` fraction of labels is flipped, then each
    cell is independently hidden (set unknown) with probability
    ``missingness``.
    """
    if samples < 1 or features < 1 or classes < 1:
        raise ValueError("samples, features and classes must all be >= 1")
    if not 0.0 <= missingness < 1.0:
        raise ValueError("missingness must lie in [0, 1)")
    if not 0.0 <= noise <= 0.5:
        raise ValueError("noise must lie in [0, 0.5]")
    rng = _rng(seed, 0)
    x = rng.standard_normal((samples, features))
    w = rng.standard_normal((features, classes))
    w /= np.linalg.norm(w, axis=0)
    b = rng.uniform(-0.5, 0.5, classes)
    y = (x @ w + b > 0).astype(np.int8)
    flip = rng.random(y.shape) < noise
    y[flip] = 1 - y[flip]
    hidden = rng.random(y.shape) < missingness
    y[hidden] = UNKNOWN
    names = tuple(f"AU{i + 1:02d}" for i in range(classes))
    return x, LabelMatrix(names, y)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) split of ``range(n)``."""
    perm = _rng(seed, 1).permutation(n)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ValueError("not enough samples for a train/validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(
    model: ToyModel,
    features: np.ndarray,
    labels: LabelMatrix,
    config: TrainConfig | None = None,
    validation: tuple[np.ndarray, LabelMatrix] | None = None,
) -> TrainReport:
    """Minibatch AMSGrad on the masked soft-F1 loss.

    ``model`` is not modified; the trained parameters live in the report.
    Without an explicit ``validation`` pair, a seeded hold-out split of
    ``config.validation_fraction`` is used.  The best epoch maximizes the
    validation selection score (mean of macro F1 and accuracy), earliest
    epoch on ties.
    """
    config = config or TrainConfig()
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(labels) or features.shape[1] != model.n_features:
        raise ValueError("features, labels and model do not fit together")
    if labels.class_names != model.class_names:
        raise ValueError("label class axis differs from the model's")

    y = labels.values
    if validation is None:
        tr, va = split_indices(len(labels), config.validation_fraction, config.seed)
        x_train, y_train = features[tr], y[tr]
        x_val, y_val = features[va], y[va]
    else:
        x_train, y_train = features, y
        x_val, y_val = np.asarray(validation[0], dtype=np.float64), validation[1].values
    if not (y_train != UNKNOWN).any():
        raise ValueError("training labels are all unknown")

    current = model.copy()
    best_model = model.copy()
    optimizer = AMSGrad(
        [current.weights.shape, current.bias.shape],
        lr=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps_opt,
    )
    shuffle = _rng(config.seed, 2)
    history: list[EpochRecord] = []
    best_epoch, best_score = None, -np.inf
    n = x_train.shape[0]

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        losses, skipped = [], 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                result, gw, gb = loss_and_parameter_gradients(
                    current, x_train[idx], y_train[idx], config.loss
                )
            except EmptyBatchError:
                skipped += 1
                continue
            optimizer.step([current.weights, current.bias], [gw, gb])
            losses.append(result.loss)

        val_pred = sigmoid(current.logits(x_val))
        report = metrics.evaluate(y_val, val_pred, current.class_names, config.threshold)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else None,
            skipped_batches=skipped,
            validation=report,
        )
        history.append(record)
        log.debug(
            "epoch %d loss %s macro F1 %.4f acc %.4f",
            epoch, record.train_loss, report.macro_f1, report.accuracy,
        )
        if record.selection_score > best_score:
            best_epoch, best_score = epoch, record.selection_score
            best_model = current.copy()

    return TrainReport(config, history, best_epoch, best_model, current)
