"""Cross-entropy loss, momentum SGD, and the training/evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import Model
from .tensor import (
    Tape,
    Tensor,
    add_const,
    backward,
    exp,
    log,
    no_grad,
    pick,
    reduce,
    sub,
)

__all__ = [
    "TrainConfig",
    "SGDState",
    "EpochStats",
    "cross_entropy",
    "sgd_step",
    "train",
    "evaluate",
    "write_history_csv",
]

log_ = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer recipe and schedule.

    Classical (coupled) weight decay: the decay term joins the gradient
    inside the momentum buffer.  The learning rate drops by ``lr_drop``
    whenever the best validation error has not improved by at least
    ``min_improve`` for ``patience`` consecutive epochs.
    """

    lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 8
    epochs: int = 50
    patience: int = 5
    lr_drop: float = 10.0
    min_improve: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ContractError("batch_size >= 1, epochs >= 0, patience >= 1 required")


@dataclass
class SGDState:
    """Momentum buffers plus the current (schedulable) learning rate."""

    velocity: dict[str, np.ndarray]
    lr: float

    @staticmethod
    def init(params, cfg: TrainConfig) -> "SGDState":
        return SGDState({n: np.zeros_like(p.data) for n, p in params.items()}, cfg.lr)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of ``label``, via log-sum-exp."""
    if logits.ndim != 1:
        raise ContractError(f"cross_entropy: logits must be a vector, got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ContractError(
            f"cross_entropy: label {label} out of range for {logits.shape[0]} classes"
        )
    m = float(np.max(logits.data))
    lse = add_const(log(reduce(exp(add_const(logits, -m)), 0, "sum")), m)
    return sub(lse, pick(logits, label))


def sgd_step(params, grads, state: SGDState, cfg: TrainConfig) -> None:
    """One momentum step over all parameters, in dict order.

    buffer <- momentum * buffer + grad + weight_decay * param
    param  <- param - lr * buffer

    Parameters carrying a ``min_value`` (codebook smoothing factors) are
    clamped from below after the step.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"sgd_step: gradient shape {g.shape} != param {p.data.shape} ({name})")
        v = cfg.momentum * state.velocity[name] + g + cfg.weight_decay * p.data
        state.velocity[name] = v
        p.data = p.data - state.lr * v
        if p.min_value is not None:
            p.data = np.maximum(p.data, p.min_value)


def _forward_loss(model: Model, image: np.ndarray, label: int):
    logits = model.forward(Tensor(image))
    return logits, cross_entropy(logits, label)


def _eval_split(model: Model, items) -> tuple[float, float]:
    """Mean loss and accuracy without recording."""
    total, correct = 0.0, 0
    with no_grad():
        for it in items:
            logits, loss = _forward_loss(model, it.image, it.label)
            total += loss.item()
            correct += int(np.argmax(logits.data)) == it.label
    return total / len(items), correct / len(items)


def train(
    model: Model, dataset, cfg: TrainConfig, threads: int = 1, state: SGDState | None = None
) -> list[EpochStats]:
    """Full training loop; deterministic given (model params, dataset, seed).

    Shuffling comes from one seeded generator; batches accumulate
    parameter gradients sample-by-sample in order (each sample's loss is
    seeded with 1/batch, so the step uses the mean-loss gradient).
    Validation drives the plateau schedule; with no validation split the
    training split is reused.  Pass ``state`` to keep the momentum
    buffers for checkpointing.
    """
    cfg.validate()
    if threads != 1:
        log_.warning("worker parallelism is not implemented; running single-threaded")
    items = dataset.split_items("train")
    if not items:
        raise ContractError("train: dataset has no training items")
    for it in items:
        if not 0 <= it.label < model.cfg.num_classes:
            raise ContractError(
                f"train: label {it.label} out of range for {model.cfg.num_classes} classes"
            )
    val_items = dataset.split_items("val") or items
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = SGDState.init(model.params, cfg)
    history: list[EpochStats] = []
    best_err = float("inf")
    stall = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        run_loss, run_correct = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            model.zero_grads()
            for j in batch:
                it = items[int(j)]
                with Tape():
                    logits, loss = _forward_loss(model, it.image, it.label)
                    backward(loss, seed=1.0 / len(batch))
                run_loss += loss.item()
                run_correct += int(np.argmax(logits.data)) == it.label
            grads = {n: p.grad for n, p in model.params.items()}
            sgd_step(model.params, grads, state, cfg)
        val_loss, val_acc = _eval_split(model, val_items)
        history.append(
            EpochStats(
                epoch=epoch + 1,
                train_loss=run_loss / len(items),
                train_acc=run_correct / len(items),
                val_loss=val_loss,
                val_acc=val_acc,
                lr=state.lr,
            )
        )
        err = 1.0 - val_acc
        if err <= best_err - cfg.min_improve:
            best_err = err
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                state.lr = state.lr / cfg.lr_drop
                stall = 0
                log_.info("epoch %d: validation error plateaued, lr -> %g", epoch + 1, state.lr)
    return history


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (classes, classes) int64, rows = true label


def evaluate(model: Model, items) -> EvalResult:
    """Accuracy and confusion matrix over a list of dataset items."""
    if not items:
        raise ContractError("evaluate: empty dataset")
    k = model.cfg.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    with no_grad():
        for it in items:
            if not 0 <= it.label < k:
                raise ContractError(f"evaluate: label {it.label} out of range for {k} classes")
            logits = model.forward(Tensor(it.image))
            confusion[it.label, int(np.argmax(logits.data))] += 1
    return EvalResult(accuracy=float(np.trace(confusion)) / len(items), confusion=confusion)


def write_history_csv(path, history: list[EpochStats]) -> None:
    """CSV with '.' decimals, ',' separators and LF line endings."""
    lines = ["epoch,train_loss,train_acc,val_loss,val_acc,lr"]
    for h in history:
        lines.append(
            f"{h.epoch},{h.train_loss:.17g},{h.train_acc:.17g},"
            f"{h.val_loss:.17g},{h.val_acc:.17g},{h.lr:.17g}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
