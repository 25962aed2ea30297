"""Fine-tuning loop: Adam, early stopping on validation accuracy, evaluation, throughput."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .encoder import (EncoderConfig, ModelParams, classify, compose_input, encoder_backward,
                      encoder_forward, featurize, init_params)
from .errors import EmptyDataset
from .numerics import l2_normalize_rows, normalize_backward
from .objectives import LabeledBatch, LossConfig, Variant, compute_loss
from .optim import OptimizerState, adam_step

PAPER_LEARNING_RATE = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    dropout_rate: float = 0.1
    max_epochs: int = 100
    patience: int = 5
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        needs_pairs = self.loss.variant in (Variant.SCL, Variant.COMBINED)
        if self.batch_size < (2 if needs_pairs else 1):
            raise ValueError("contrastive losses need batch_size >= 2")
        if self.loss.variant is Variant.SELF_SUPERVISED:
            raise ValueError("the self-supervised objective has no supervised training loop")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class Metrics:
    epoch: int
    train_loss: float
    validation_accuracy: float
    test_accuracy: Optional[float] = None
    updates_per_second: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[Metrics]
    steps: int
    step_seconds: float
    best_epoch: int

    def __iter__(self):
        # allows ``ckpt, history = train_run(...)``
        return iter((self.checkpoint, self.history))


class EarlyStopping:
    """Tracks the best validation accuracy; strict improvement resets the counter."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, accuracy: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        if accuracy > self.best:
            self.best, self.best_epoch, self.bad_epochs = accuracy, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def dataset_features(ds: Dataset, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    inputs = [compose_input(ex.text_a, ex.text_b, cfg) for ex in ds.examples]
    return featurize(inputs, cfg), ds.labels


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray, loss_cfg: LossConfig,
                   dropout: float = 0.0, rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    raw, cache = encoder_forward(params, x, dropout, rng)
    z, norms = l2_normalize_rows(raw)
    logits = classify(raw, params)
    out = compute_loss(LabeledBatch(z, logits, y, params.num_classes), loss_cfg, head_weights=params.head_w)

    g_raw = np.zeros_like(raw)
    g_head_w = np.zeros_like(params.head_w)
    g_head_b = np.zeros_like(params.head_b)
    if out.grad_logits is not None:
        g_raw += out.grad_logits @ params.head_w
        g_head_w += out.grad_logits.T @ raw
        g_head_b += out.grad_logits.sum(axis=0)
    if out.grad_head is not None:
        g_head_w += out.grad_head
    if out.grad_embeddings is not None:
        g_raw += normalize_backward(out.grad_embeddings, z, norms)
    grads = encoder_backward(params, cache, g_raw)
    grads["head.w"] = g_head_w
    grads["head.b"] = g_head_b
    return out.value, grads


def train_step(params: ModelParams, state: OptimizerState, x: np.ndarray, y: np.ndarray,
               cfg: TrainConfig, rng: np.random.Generator) -> tuple[ModelParams, OptimizerState, float]:
    value, grads = loss_and_grads(params, x, y, cfg.loss, cfg.dropout_rate, rng)
    new, state = adam_step(params.named(), grads, state, cfg.learning_rate)
    return ModelParams.from_named(new), state, value


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    raw, _ = encoder_forward(params, x)
    # argmax returns the first maximum: ties go to the lower class index
    return np.argmax(classify(raw, params), axis=1)


def accuracy_from_features(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(predict(params, x) == y))


def evaluate(model: Checkpoint, ds: Dataset) -> float:
    """Fraction of examples whose argmax logit equals the label."""
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    x, y = dataset_features(ds, model.config)
    return accuracy_from_features(model.params, x, y)


def measure_throughput(run: "TrainResult | tuple[int, float]", min_steps: int = 50) -> float:
    """Optimizer updates per second of step time (data preparation excluded)."""
    steps, seconds = (run.steps, run.step_seconds) if isinstance(run, TrainResult) else run
    if steps < min_steps:
        raise ValueError(f"need at least {min_steps} optimizer steps, got {steps}")
    if seconds <= 0:
        raise ValueError("elapsed time must be positive")
    return steps / seconds


def _initial_params(init, encoder_cfg: EncoderConfig, num_classes: int) -> ModelParams:
    if init is None:
        return init_params(encoder_cfg, num_classes)
    if isinstance(init, Checkpoint):
        return init.params.copy()
    return init.copy()


def train_run(train: Dataset, validation: Dataset, init: "ModelParams | Checkpoint | None",
              cfg: TrainConfig, encoder_cfg: EncoderConfig | None = None, *,
              test: Dataset | None = None, task: str = "task",
              max_steps: int | None = None) -> TrainResult:
    """Fine-tune and return the checkpoint of the best-validation epoch.

    Batches are reshuffled every epoch from a generator seeded by
    ``cfg.seed``; the final short batch is kept. Training stops after
    ``cfg.patience`` epochs without strict improvement, after
    ``cfg.max_epochs`` epochs, or once ``max_steps`` updates have run.
    """
    if len(train) == 0:
        raise EmptyDataset("training set is empty")
    if encoder_cfg is None:
        encoder_cfg = init.config if isinstance(init, Checkpoint) else EncoderConfig()
    params = _initial_params(init, encoder_cfg, train.num_classes)
    x_train, y_train = dataset_features(train, encoder_cfg)
    x_val, y_val = dataset_features(validation, encoder_cfg)
    xy_test = dataset_features(test, encoder_cfg) if test is not None and len(test) else None

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    stopper = EarlyStopping(cfg.patience)
    best = (params.copy(), state.copy())
    history: list[Metrics] = []
    steps, step_seconds = 0, 0.0
    n = len(y_train)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses, epoch_steps, epoch_seconds = [], 0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            t0 = time.perf_counter()
            params, state, value = train_step(params, state, xb, yb, cfg, rng)
            epoch_seconds += time.perf_counter() - t0
            epoch_steps += 1
            losses.append(value)
            if max_steps is not None and steps + epoch_steps >= max_steps:
                break
        steps += epoch_steps
        step_seconds += epoch_seconds
        val_acc = accuracy_from_features(params, x_val, y_val) if len(y_val) else 0.0
        test_acc = accuracy_from_features(params, *xy_test) if xy_test is not None else None
        history.append(Metrics(epoch, float(np.mean(losses)), val_acc, test_acc,
                               epoch_steps / epoch_seconds if epoch_seconds > 0 else None))
        if stopper.update(epoch, val_acc):
            best = (params.copy(), state.copy())
        if stopper.should_stop or (max_steps is not None and steps >= max_steps):
            break

    best_metrics = history[stopper.best_epoch - 1]
    meta = {"task": task, "epoch": stopper.best_epoch, "step": steps,
            "metrics": {"validation_accuracy": best_metrics.validation_accuracy,
                        "test_accuracy": best_metrics.test_accuracy},
            "train_config": cfg.to_dict()}
    ckpt = Checkpoint(encoder_cfg, best[0], meta, best[1])
    return TrainResult(ckpt, history, steps, step_seconds, stopper.best_epoch)
