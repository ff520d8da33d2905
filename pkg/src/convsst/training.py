"""Adam optimization, the training loop, and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import DatasetSplit, HsiCube, SampleRef, batch_iter
from .metrics import ConfusionMatrix
from .model import ModelConfig, ModelWeights, model_forward
from .tensor import Tape, TensorError, zero_grads


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    eval_interval: int = 0  # epochs between held-out evals; 0 disables

    def __post_init__(self):
        if self.lr < 0:
            raise TensorError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise TensorError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise TensorError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "seed": self.seed, "eval_interval": self.eval_interval,
        }


class AdamState:
    """First/second moment buffers per trainable parameter, plus step count."""

    def __init__(self, weights: ModelWeights):
        self.m = {n: np.zeros_like(p.data) for n, p in weights.trainable_items()}
        self.v = {n: np.zeros_like(p.data) for n, p in weights.trainable_items()}
        self.t = 0


def adam_step(weights: ModelWeights, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update from the currently populated gradients."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in weights.trainable_items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        np.subtract(p.data, update.astype(p.dtype, copy=False), out=p.data)


def train(cube: HsiCube, split: DatasetSplit, weights: ModelWeights,
          config: ModelConfig, tcfg: TrainConfig, callbacks=(),
          optimizer: AdamState | None = None, dtype=np.float32):
    """Optimize weights on the train split; returns (history, optimizer).

    One history row per epoch: {"epoch", "loss", "train_acc"}, where the
    accuracy comes from the training-mode batch logits. Every epoch-level
    callback receives (epoch, row). Determinism: all randomness (shuffle
    order, dropout masks) is drawn from a generator seeded with tcfg.seed.
    """
    if not split.train:
        raise TensorError("empty train split")
    rng = np.random.default_rng(tcfg.seed)
    state = optimizer if optimizer is not None else AdamState(weights)
    history: list[dict] = []
    for epoch in range(1, tcfg.epochs + 1):
        loss_sum = 0.0
        correct = 0
        seen = 0
        steps = 0
        for batch, labels in batch_iter(cube, split.train, config.patch_size,
                                        tcfg.batch_size, shuffle=True, rng=rng, dtype=dtype):
            with Tape() as tape:
                logits = model_forward(batch, weights, config, training=True, rng=rng)
                loss = ops.cross_entropy(logits, labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise TrainingDiverged(
                    f"loss became {loss_value} at epoch {epoch}, step {steps + 1}")
            tape.backward(loss)
            adam_step(weights, state, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            zero_grads(p for _, p in weights.trainable_items())
            loss_sum += loss_value * len(labels)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
            steps += 1
        row = {"epoch": epoch, "loss": loss_sum / seen, "train_acc": correct / seen}
        history.append(row)
        for cb in callbacks:
            cb(epoch, row)
    return history, state


def evaluate(cube: HsiCube, samples: list[SampleRef], weights: ModelWeights,
             config: ModelConfig, batch_size: int = 64, dtype=np.float32):
    """Eval-mode predictions and confusion matrix over the given samples.

    Argmax breaks logit ties toward the lowest class index; batching
    granularity cannot change the result (batch norm uses running stats).
    """
    cm = ConfusionMatrix(config.classes)
    predictions = np.empty(len(samples), dtype=np.int64)
    pos = 0
    for batch, labels in batch_iter(cube, samples, config.patch_size,
                                    batch_size, shuffle=False, dtype=dtype):
        logits = model_forward(batch, weights, config, training=False)
        preds = logits.data.argmax(axis=1)
        cm.update_batch(labels, preds)
        predictions[pos : pos + len(labels)] = preds
        pos += len(labels)
    return predictions, cm
