"""Adam training, evaluation and finetuning on the synthetic task."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..linalg import Rng
from ..model import ArchConfig, Params, copy_params, forward, init_params
from .grad import cross_entropy, loss_and_grads

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    kind = "diverged"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 50
    learning_rate: float = 2e-3
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRow:
    label: str
    accuracy: float
    loss: float
    epoch: int | None = None
    lam: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.loss >= 0.0:
            raise ValueError(f"loss must be non-negative, got {self.loss}")

    def to_json(self) -> str:
        d = {"label": self.label, "epoch": self.epoch, "accuracy": self.accuracy,
             "loss": self.loss, **self.extra}
        if self.lam is not None:
            d["lambda"] = self.lam
        return json.dumps(d, sort_keys=True)


def predict_logits(params: Params, arch: ArchConfig, patches: np.ndarray,
                   chunk: int = 500) -> np.ndarray:
    out = [forward(params, arch, patches[i:i + chunk])[0] for i in range(0, len(patches), chunk)]
    return np.concatenate(out).astype(np.float64)


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, label: str = "") -> MetricsRow:
    loss, _ = cross_entropy(np.asarray(logits, dtype=np.float64), labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return MetricsRow(label=label, accuracy=acc, loss=loss)


def evaluate(params: Params, arch: ArchConfig, dataset, label: str = "") -> MetricsRow:
    """Accuracy and mean cross-entropy on ``dataset = (patches, labels)``."""
    patches, labels = dataset
    return metrics_from_logits(predict_logits(params, arch, patches), labels, label)


class Adam:
    """Adam with decoupled weight decay on weight matrices (AdamW-style)."""

    def __init__(self, params: Params, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            v = self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            p = params[k].astype(np.float64)
            if p.ndim == 2 and c.weight_decay:
                p *= 1.0 - c.learning_rate * c.weight_decay
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            params[k] = p.astype(params[k].dtype)


def finetune(params: Params, arch: ArchConfig, train_data, cfg: TrainConfig,
             eval_data=None, label: str = "train") -> tuple[Params, list[MetricsRow]]:
    """Continue training ``params`` (copied) for ``cfg.epochs`` epochs.

    The curve starts with epoch 0, a full evaluation on the training set
    before any update; row ``k`` then holds the mean loss and accuracy over
    the minibatches of epoch ``k``. When ``eval_data`` is given each row
    also carries ``test_accuracy`` / ``test_loss`` measured after the epoch.
    """
    params = copy_params(params)
    patches, labels = train_data
    n = len(labels)
    shuffle = Rng(cfg.seed, stream=1)
    opt = Adam(params, cfg)

    def record(epoch, row=None):
        row = row or evaluate(params, arch, train_data, label)
        row.epoch = epoch
        if eval_data is not None:
            test = evaluate(params, arch, eval_data)
            row.extra = {"test_accuracy": test.accuracy, "test_loss": test.loss}
        return row

    if not all(np.isfinite(v).all() for v in params.values()):
        raise TrainingDivergedError("non-finite parameters at epoch 0")
    curve = [record(0)]
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        loss_sum = correct = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, logits = loss_and_grads(params, arch, patches[idx], labels[idx],
                                                 return_logits=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, step {start // cfg.batch_size}"
                )
            loss_sum += loss * len(idx)
            correct += float(np.sum(np.argmax(logits, axis=1) == labels[idx]))
            opt.step(params, grads)
        curve.append(record(epoch, MetricsRow(label, correct / n, loss_sum / n)))
        log.debug("epoch %d loss %.4f acc %.4f", epoch, curve[-1].loss, curve[-1].accuracy)
    return params, curve


def train_model(arch: ArchConfig, train_data, cfg: TrainConfig,
                eval_data=None) -> tuple[Params, list[MetricsRow]]:
    """Train from an initialisation seeded by ``cfg.seed``; batches shuffle from the same seed."""
    params = init_params(arch, Rng(cfg.seed, stream=0))
    return finetune(params, arch, train_data, cfg, eval_data)
