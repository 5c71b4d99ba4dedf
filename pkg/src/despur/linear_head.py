"""Linear classification heads over frozen embeddings.

The training objective is cross-entropy over the original training set plus
``debug_weight`` times cross-entropy over an optional debug set:

    loss = ce(original_train) + debug_weight * ce(debug_train)

Optimization is mini-batch SGD with momentum and weight decay. The debug
weighting is applied per example: rows from the two sets are shuffled into
shared batches and a debug row's loss contribution is scaled by
``debug_weight``. At debug_weight == 0 the debug rows are excluded from
batch composition entirely, so training an attached-but-zero-weighted debug
set is bitwise identical to training without one.

All state is seeded: weights and momentum buffers start at zero, the only
randomness is the per-epoch shuffle, and reruns with one rng_seed reproduce
the exact same head.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO

import numpy as np

from .interchange import FeatureSet, ShapeMismatchError, VocabularyError

HEAD_MAGIC = b"HEAD1"


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(
            f"training diverged at epoch {epoch} (learning_rate={learning_rate}); "
            "lower the learning rate or check feature scaling"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass
class TrainConfig:
    learning_rate: float = 0.2
    epochs: int = 1000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    debug_weight: float = 0.5
    batch_size: int = 256
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.debug_weight < 0:
            raise ValueError(f"debug_weight must be >= 0, got {self.debug_weight}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class WeightedSets:
    """Original training rows plus an optional debug set in the same space."""

    original_train: FeatureSet
    debug_train: FeatureSet | None = None

    def __post_init__(self):
        if self.debug_train is not None:
            if self.debug_train.dim != self.original_train.dim:
                raise ShapeMismatchError(
                    f"debug_train dim {self.debug_train.dim} != "
                    f"original_train dim {self.original_train.dim}"
                )
            if self.debug_train.class_names != self.original_train.class_names:
                raise VocabularyError("debug_train class vocabulary differs from original_train")


@dataclass
class LinearHead:
    weights: np.ndarray  # (n_classes, dim)
    bias: np.ndarray  # (n_classes,)
    class_names: list[str]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.class_names = list(self.class_names)
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.class_names):
            raise ValueError(
                f"weights shape {self.weights.shape} does not match "
                f"{len(self.class_names)} classes"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match weights")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("head parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.bias


@dataclass
class Evaluation:
    accuracy: float
    predicted_labels: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_cross_entropy(head: LinearHead, fs: FeatureSet) -> float:
    probs = softmax(head.logits(fs.features))
    with np.errstate(divide="ignore"):
        per_row = -np.log(probs[np.arange(len(fs)), fs.labels])
    return float(per_row.mean())


def _check_sets(head: LinearHead, sets: WeightedSets):
    if sets.original_train.dim != head.dim:
        raise ShapeMismatchError(
            f"set dim {sets.original_train.dim} != head dim {head.dim}"
        )
    if len(sets.original_train) == 0:
        raise ValueError("original_train is empty")


def weighted_loss(head: LinearHead, sets: WeightedSets, debug_weight: float) -> float:
    """Per-set mean cross-entropy, the debug term scaled by debug_weight.

    At debug_weight == 0 the debug term is skipped outright, so the result
    is bit-equal to the loss of the original set alone.
    """
    _check_sets(head, sets)
    loss = _mean_cross_entropy(head, sets.original_train)
    if sets.debug_train is not None and debug_weight != 0.0 and len(sets.debug_train):
        loss += debug_weight * _mean_cross_entropy(head, sets.debug_train)
    return loss


def _set_gradient(head: LinearHead, fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(fs.features, dtype=np.float64)
    probs = softmax(head.logits(x))
    probs[np.arange(len(fs)), fs.labels] -= 1.0
    probs /= len(fs)
    return probs.T @ x, probs.sum(axis=0)


def gradient(
    head: LinearHead, sets: WeightedSets, debug_weight: float
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of weighted_loss w.r.t. (weights, bias)."""
    _check_sets(head, sets)
    grad_w, grad_b = _set_gradient(head, sets.original_train)
    if sets.debug_train is not None and debug_weight != 0.0 and len(sets.debug_train):
        dw, db = _set_gradient(head, sets.debug_train)
        grad_w += debug_weight * dw
        grad_b += debug_weight * db
    return grad_w, grad_b


def train_head(sets: WeightedSets, config: TrainConfig) -> LinearHead:
    """Fit a head by seeded mini-batch SGD with momentum and weight decay.

    Weights, bias and momentum buffers all start at zero; the shuffle is the
    only random element and is driven by config.rng_seed, so identical
    inputs and seed give a bitwise-identical head.
    """
    original = sets.original_train
    if len(original) == 0:
        raise ValueError("original_train is empty")
    class_names = original.class_names
    n_classes = len(class_names)
    dim = original.dim

    x = np.asarray(original.features, dtype=np.float64)
    y = original.labels
    row_weights = np.ones(len(original))
    # debug_weight == 0 keeps debug rows out of the pool so the rng stream
    # and batch composition match a run with no debug set at all.
    if sets.debug_train is not None and config.debug_weight != 0.0 and len(sets.debug_train):
        x = np.vstack([x, np.asarray(sets.debug_train.features, dtype=np.float64)])
        y = np.concatenate([y, sets.debug_train.labels])
        row_weights = np.concatenate(
            [row_weights, np.full(len(sets.debug_train), config.debug_weight)]
        )

    n = len(y)
    weights = np.zeros((n_classes, dim))
    bias = np.zeros(n_classes)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(bias)
    rng = np.random.default_rng(config.rng_seed)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = x[idx]
            yb = y[idx]
            wb = row_weights[idx]
            probs = softmax(xb @ weights.T + bias)
            picked = probs[np.arange(len(idx)), yb]
            with np.errstate(divide="ignore"):
                batch_loss = float(np.mean(wb * -np.log(picked)))
            if not np.isfinite(batch_loss):
                raise DivergenceError(epoch, config.learning_rate)
            probs[np.arange(len(idx)), yb] -= 1.0
            probs *= (wb / len(idx))[:, None]
            grad_w = probs.T @ xb + config.weight_decay * weights
            grad_b = probs.sum(axis=0) + config.weight_decay * bias
            vel_w = config.momentum * vel_w + grad_w
            vel_b = config.momentum * vel_b + grad_b
            weights = weights - config.learning_rate * vel_w
            bias = bias - config.learning_rate * vel_b

    if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
        raise DivergenceError(config.epochs - 1, config.learning_rate)
    return LinearHead(weights=weights, bias=bias, class_names=class_names)


def evaluate(head: LinearHead, fs: FeatureSet) -> Evaluation:
    """Argmax accuracy; logit ties resolve to the lowest class index."""
    if len(fs) == 0:
        raise ValueError("cannot evaluate an empty set")
    if fs.dim != head.dim:
        raise ShapeMismatchError(f"set dim {fs.dim} != head dim {head.dim}")
    predictions = np.argmax(head.logits(fs.features), axis=1)
    accuracy = float(np.mean(predictions == fs.labels))
    return Evaluation(accuracy=accuracy, predicted_labels=predictions)


def write_head(
    head: LinearHead, dest: BinaryIO | str | os.PathLike, train_config: TrainConfig | None = None
) -> int:
    """Serialize a head: HEAD1 magic, dims, float32 block, JSON trailer."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as sink:
            return write_head(head, sink, train_config)
    n_classes, dim = head.weights.shape
    block = np.concatenate([head.weights.ravel(), head.bias]).astype("<f4").tobytes()
    trailer = json.dumps(
        {
            "class_names": head.class_names,
            "train_config": None if train_config is None else asdict(train_config),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = (
        struct.pack("<5sII", HEAD_MAGIC, n_classes, dim)
        + block
        + trailer
        + struct.pack("<Q", len(trailer))
    )
    dest.write(payload)
    return len(payload)


def read_head(source: BinaryIO | str | os.PathLike) -> tuple[LinearHead, TrainConfig | None]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as stream:
            return read_head(stream)
    magic = source.read(5)
    if magic != HEAD_MAGIC:
        raise ValueError(f"bad head magic {magic!r}, expected {HEAD_MAGIC!r}")
    n_classes, dim = struct.unpack("<II", source.read(8))
    block = source.read(4 * (n_classes * dim + n_classes))
    if len(block) != 4 * (n_classes * dim + n_classes):
        raise ValueError("truncated head container: short float block")
    rest = source.read()
    if len(rest) < 8:
        raise ValueError("truncated head container: missing trailer length")
    (trailer_len,) = struct.unpack("<Q", rest[-8:])
    if trailer_len != len(rest) - 8:
        raise ValueError("head trailer length mismatch")
    trailer = json.loads(rest[:-8].decode("utf-8"))
    flat = np.frombuffer(block, dtype="<f4").astype(np.float64)
    weights = flat[: n_classes * dim].reshape(n_classes, dim)
    bias = flat[n_classes * dim :]
    cfg = trailer.get("train_config")
    config = TrainConfig(**cfg) if cfg is not None else None
    return LinearHead(weights=weights, bias=bias, class_names=trailer["class_names"]), config
