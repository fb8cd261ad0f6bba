"""
Training loop, optimizers and evaluation for the synthetic-task models.
"""
from __future__ import annotations

import dataclasses
import enum
import logging
import math
import os
import pathlib
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence, Union

import numpy as np

from . import constants
from . import tensor as T
from .models import Model, ModelSpec, build_model, collate
from .tasks import Dataset, Instance, SortingInstance, is_consistent_sort
from .util import make_rng, write_csv

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("epoch", "train_loss", "test_accuracy", "wall_ms")
EVAL_BATCH_SIZE = 256


class TrainingDivergedError(RuntimeError):
    ...


class OptimizerKind(str, enum.Enum):
    ADAM = "adam"
    SGD = "sgd"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings.

    ``lr = 0`` is accepted and leaves every parameter untouched.
    """
    optimizer: OptimizerKind = OptimizerKind.ADAM
    lr: float = 3e-4
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"Learning rate must be finite and nonnegative, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")


class Optimizer:
    def __init__(self, params: Sequence[T.Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        self.steps += 1
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue
            if self.weight_decay:
                param.data -= self.lr * self.weight_decay * param.data
            param.data -= self._update(index, param.grad)

    def _update(self, index: int, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball SGD; ``momentum=0`` is plain gradient descent."""

    def __init__(self, params, lr, weight_decay=0.0, momentum=0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(param.data) for param in self.params]

    def _update(self, index, grad):
        velocity = self.velocity[index]
        velocity *= self.momentum
        velocity += grad
        return self.lr * velocity


class Adam(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(param.data) for param in self.params]
        self.v = [np.zeros_like(param.data) for param in self.params]

    def _update(self, index, grad):
        m, v = self.m[index], self.v[index]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad ** 2
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, params: Sequence[T.Tensor]) -> Optimizer:
    if cfg.optimizer is OptimizerKind.SGD:
        return SGD(params, cfg.lr, cfg.weight_decay, momentum=cfg.momentum)
    return Adam(
        params, cfg.lr, cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
    )


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    wall_ms: float


@dataclasses.dataclass
class TrainLog:
    rows: list[EpochRecord] = dataclasses.field(default_factory=list)

    @property
    def final(self) -> EpochRecord:
        return self.rows[-1]

    def losses(self) -> list[float]:
        return [row.train_loss for row in self.rows]

    def write_csv(self, path: Union[str, os.PathLike]) -> pathlib.Path:
        return write_csv(
            path,
            TRAIN_LOG_HEADER,
            [dataclasses.astuple(row) for row in self.rows],
        )


@dataclasses.dataclass
class Metrics:
    """
    ``accuracy`` is per-token for sorting and per-instance for retrieval.
    ``consistency_accuracy`` (sorting only) counts instances whose predicted
    indices form any valid sort, not just the stable one.
    """
    accuracy: float
    n_instances: int
    loss: float
    consistency_accuracy: Optional[float] = None


def _batches(instances: Sequence[Instance], batch_size: int, order: Optional[np.ndarray] = None):
    order = np.arange(len(instances)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield [instances[index] for index in order[start:start + batch_size]]


def predict(model: Model, instances: Sequence[Instance]) -> tuple[np.ndarray, float]:
    """Argmax predictions and the mean loss over ``instances``."""
    predictions, loss_sum, count = [], 0.0, 0
    with T.no_grad():
        for chunk in _batches(instances, EVAL_BATCH_SIZE):
            batch = collate(model.spec.variant, chunk)
            logits = model(batch).logits
            loss = T.cross_entropy(logits, batch.labels, batch.label_mask).item()
            loss_sum += loss * len(batch)
            count += len(batch)
            predictions.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(predictions, axis=0), loss_sum / count


def evaluate(model: Model, instances: Sequence[Instance]) -> Metrics:
    """
    Score a model on a list of instances.

    Raises
    ------
    ValueError
        If ``instances`` is empty.
    """
    if not instances:
        raise ValueError("Cannot evaluate on an empty instance list")
    predictions, loss = predict(model, instances)
    if isinstance(instances[0], SortingInstance):
        labels = np.array([instance.labels for instance in instances])
        consistent = [
            is_consistent_sort(instance.target, instance.ordering, predicted.tolist())
            for instance, predicted in zip(instances, predictions)
        ]
        return Metrics(
            accuracy=float(np.mean(predictions == labels)),
            n_instances=len(instances),
            loss=loss,
            consistency_accuracy=float(np.mean(consistent)),
        )
    starts = np.array([instance.start for instance in instances])
    return Metrics(
        accuracy=float(np.mean(predictions == starts)),
        n_instances=len(instances),
        loss=loss,
    )


def train_epoch(
    model: Model,
    optimizer: Optimizer,
    instances: Sequence[Instance],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int,
) -> float:
    """One pass over shuffled ``instances``; returns the mean training loss."""
    order = rng.permutation(len(instances))
    loss_sum = 0.0
    for batch_index, chunk in enumerate(_batches(instances, cfg.batch_size, order)):
        batch = collate(model.spec.variant, chunk)
        with T.Tape():
            try:
                logits = model(batch).logits
            except T.NumericError as ex:
                raise TrainingDivergedError(
                    f"Non-finite activations at epoch {epoch}, batch {batch_index}: {ex}"
                ) from ex
            loss = T.cross_entropy(logits, batch.labels, batch.label_mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"Loss became {value} at epoch {epoch}, batch {batch_index} "
                    f"({model.spec.variant.value}, lr={cfg.lr})"
                )
            optimizer.zero_grad()
            T.backward(loss)
        optimizer.step()
        loss_sum += value * len(chunk)
        logger.debug("epoch %d batch %d loss %.6f", epoch, batch_index, value)
    return loss_sum / len(instances)


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    train_instances: Optional[Sequence[Instance]] = None,
) -> TrainLog:
    """
    Minimize cross-entropy on ``dataset.train`` (or ``train_instances``),
    scoring ``dataset.test`` after every epoch.

    Batch order comes from ``cfg.seed`` alone, so the log is reproducible
    apart from ``wall_ms``.

    Raises
    ------
    TrainingDivergedError
        If a batch loss is NaN or infinite.
    """
    instances = list(train_instances if train_instances is not None else dataset.train)
    optimizer = make_optimizer(cfg, model.parameters())
    rng = make_rng(cfg.seed, "batches")
    log = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        train_loss = train_epoch(model, optimizer, instances, cfg, rng, epoch)
        metrics = evaluate(model, dataset.test)
        wall_ms = (time.perf_counter() - started) * 1e3
        log.rows.append(EpochRecord(epoch, train_loss, metrics.accuracy, wall_ms))
        logger.info(
            "%s epoch %d/%d: loss=%.4f test_accuracy=%.4f (%.0f ms)",
            model.spec.variant.value, epoch, cfg.epochs, train_loss,
            metrics.accuracy, wall_ms,
        )
    return log


@dataclasses.dataclass(frozen=True)
class TrainJob:
    spec: ModelSpec
    cfg: TrainConfig
    dataset: Dataset
    model_seed: int = 0


@dataclasses.dataclass
class TrainResult:
    job: TrainJob
    log: TrainLog
    model: Model


def run_job(job: TrainJob) -> TrainResult:
    model = build_model(job.spec, seed=job.model_seed)
    return TrainResult(job=job, log=train(model, job.dataset, job.cfg), model=model)


def run_jobs(jobs: Sequence[TrainJob], workers: Optional[int] = None) -> list[TrainResult]:
    """Train independent jobs, in a process pool when ``workers > 1``; order is kept."""
    workers = constants.WORKERS if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(run_job, jobs))
    return [run_job(job) for job in jobs]
