"""Adadelta, the training loop with early stopping, and batch evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .data import seed_for
from .metrics import CLASS_NAMES, PredictionRecord
from .model import NetworkSpec, ParameterStore, Tape, backward, forward

log = logging.getLogger(__name__)


@dataclass
class AdadeltaState:
    rho: float = 0.95
    epsilon: float = 1e-6
    learning_rate: float = 1.0
    sq_grad: dict = field(default_factory=dict)  # E[g^2] per (layer, name)
    sq_delta: dict = field(default_factory=dict)  # E[dx^2] per (layer, name)
    steps: int = 0


def adadelta_step(store: ParameterStore, state: AdadeltaState) -> None:
    """One Adadelta update of every trainable parameter, then zero the gradients.

    Non-trainable entries (batch-norm running statistics) are never touched.
    A non-finite gradient aborts before anything is modified.
    """
    params = list(store.items(trainable_only=True))
    for layer, name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise engine.NonFiniteError(f"non-finite gradient for layer {layer} {name}")
    rho, eps, lr = state.rho, state.epsilon, state.learning_rate
    for layer, name, p in params:
        key = (layer, name)
        eg = state.sq_grad.get(key)
        if eg is None:
            eg = state.sq_grad[key] = np.zeros_like(p.value)
            state.sq_delta[key] = np.zeros_like(p.value)
        ed = state.sq_delta[key]
        g = p.grad
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -lr * np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.value += delta
        p.zero_grad()
    state.steps += 1


@dataclass
class TrainConfig:
    max_epochs: int = 120
    patience: int = 15
    min_delta: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    restore_best: bool = True
    rho: float = 0.95
    epsilon: float = 1e-6
    learning_rate: float = 1.0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs)")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(**d)


def _predict_probs(spec, store, dataset, batch_size):
    n = len(dataset)
    probs = np.empty((n, spec.n_classes), dtype=np.float64)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        logits = forward(spec, store, dataset.get_batch(idx), mode="infer")
        probs[idx] = engine.softmax(logits.astype(np.float64))
    return probs


def accuracy(spec, store, dataset, batch_size: int = 32) -> float:
    probs = _predict_probs(spec, store, dataset, batch_size)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


def fit(spec: NetworkSpec, store: ParameterStore, train, validation, config: TrainConfig,
        state: Optional[AdadeltaState] = None) -> TrainReport:
    """Train with Adadelta until ``max_epochs`` or until validation accuracy stalls.

    Validation accuracy must improve by more than ``min_delta`` within
    ``patience`` epochs of the last improvement, otherwise training stops.
    """
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training and validation sets must be non-empty")
    overlap = set(train.patient_ids) & set(validation.patient_ids)
    if overlap:
        raise ValueError(f"patients in both train and validation: {sorted(overlap)[:5]}")
    if state is None:
        state = AdadeltaState(config.rho, config.epsilon, config.learning_rate)

    report = TrainReport()
    t0 = time.perf_counter()
    best_acc: Optional[float] = None
    best_snapshot = None
    wait = 0
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng(seed_for(config.seed, "shuffle", epoch)).permutation(n)
        loss_sum, hits = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            tape = Tape()
            logits = forward(spec, store, train.get_batch(idx), mode="train", tape=tape)
            labels = train.labels[idx]
            loss, probs = engine.softmax_cross_entropy(logits, labels)
            backward(spec, store, engine.softmax_cross_entropy_backward(probs, labels), tape)
            adadelta_step(store, state)
            loss_sum += loss * len(idx)
            hits += int(np.sum(np.argmax(probs, axis=1) == labels))
        val_acc = accuracy(spec, store, validation, config.batch_size)
        report.train_loss.append(loss_sum / n)
        report.train_accuracy.append(hits / n)
        report.val_accuracy.append(val_acc)
        report.stopped_epoch = epoch
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch, loss_sum / n, hits / n, val_acc)

        if best_acc is None or val_acc > best_acc + config.min_delta:
            best_acc, report.best_epoch, wait = val_acc, epoch, 0
            if config.restore_best:
                best_snapshot = store.snapshot()
        else:
            wait += 1
            if wait >= config.patience:
                break

    if config.restore_best and best_snapshot is not None:
        store.restore(best_snapshot)
    report.wall_time = time.perf_counter() - t0
    return report


def predictions_from_probs(probs: np.ndarray, dataset) -> list[PredictionRecord]:
    # argmax returns the first maximum, so exact ties go to class 0
    pred = np.argmax(probs, axis=1)
    return [PredictionRecord(str(dataset.image_ids[i]), str(dataset.patient_ids[i]),
                             CLASS_NAMES[int(dataset.labels[i])], CLASS_NAMES[int(pred[i])],
                             float(max(probs[i, pred[i]], math.ulp(0.0))))
            for i in range(len(pred))]


def evaluate(spec: NetworkSpec, store: ParameterStore, dataset, batch_size: int = 32) -> list[PredictionRecord]:
    """One prediction per dataset item, in dataset order, using inference mode."""
    return predictions_from_probs(_predict_probs(spec, store, dataset, batch_size), dataset)
