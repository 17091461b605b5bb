"""One-hot BCE training with Adam and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .data import DatasetManifest, augment, encode_batch, sample_rng
from .models import BcosNet, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    warmup_epochs: int = 10
    total_epochs: int = 40
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.lr_max <= 0 or self.batch_size <= 0:
            raise ValueError("lr_max and batch_size must be positive")


PRESETS = {
    "desk": {"train": {}, "image_size": 64},
    "paper": {"train": {"lr_max": 1e-5, "warmup_epochs": 10, "total_epochs": 200, "batch_size": 128},
              "image_size": 224},
}


def preset(name: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**PRESETS[name]["train"], **overrides})


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def bce_loss(logits: Tensor, onehot) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against one-hot targets.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``; the gradient is
    ``(sigmoid(z) - y) / (N*K)``.
    """
    z = logits.data.astype(np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != z.shape:
        raise ValueError(f"targets {y.shape} do not match logits {z.shape}")
    value = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    count = z.size

    def backward(g):
        sig = 0.5 * (1 + np.tanh(0.5 * z))
        return ((g * (sig - y) / count).astype(logits.dtype),)

    return Tensor._make(np.asarray(value, dtype=logits.dtype), (logits,), backward, "bce")


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    w, total = cfg.warmup_epochs, cfg.total_epochs
    if epoch < w:
        return cfg.lr_max * epoch / w
    progress = min(max((epoch - w) / (total - w), 0.0), 1.0)
    return cfg.lr_max * 0.5 * (1 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_accuracy: float = -1.0
    best_epoch: int = -1


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: TrainState,
              lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def _batches(indices, batch_size):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def evaluate(model: BcosNet, samples, channels: int, batch_size: int = 64,
             dtype=np.float32) -> tuple[float, float]:
    """Mean BCE loss and accuracy over ``samples`` (no augmentation)."""
    if not samples:
        return float("nan"), float("nan")
    k = model.config.num_classes
    loss_sum, correct = 0.0, 0
    with no_grad():
        for chunk in _batches(samples, batch_size):
            x = Tensor(encode_batch([s.image for s in chunk], channels).astype(dtype))
            labels = [s.label for s in chunk]
            logits = model(x)
            loss_sum += bce_loss(logits, one_hot(labels, k)).item() * len(chunk)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return loss_sum / len(samples), correct / len(samples)


def train(model: BcosNet, manifest: DatasetManifest, cfg: TrainConfig, out_dir=None,
          pad_quaternion: bool = False, on_epoch=None) -> TrainState:
    """Train ``model`` in place; log metrics and keep the best checkpoint.

    With ``out_dir``, writes ``metrics.jsonl`` (one record per epoch and split)
    and ``best.hxb``. A non-finite loss aborts with :class:`TrainingError`,
    leaving the last good checkpoint untouched.
    """
    channels = 8 if pad_quaternion else 6
    if model.config.input_channels != channels:
        raise ValueError(
            f"model expects {model.config.input_channels} input channels but data provides {channels}"
            + ("" if pad_quaternion else " (quaternion-like models need padded input)"))
    if manifest.num_classes != model.config.num_classes:
        raise ValueError(f"dataset has {manifest.num_classes} classes, model {model.config.num_classes}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    state = TrainState()
    params = model.parameters()
    k = model.config.num_classes
    size = model.config.image_size
    train_idx = list(manifest.train_idx)
    test_samples = manifest.split("test")
    num_batches = math.ceil(len(train_idx) / cfg.batch_size)

    for epoch in range(cfg.total_epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_idx))
        loss_sum, correct, seen = 0.0, 0, 0
        for b, chunk in enumerate(_batches(order, cfg.batch_size)):
            ids = [train_idx[i] for i in chunk]
            batch = [manifest.samples[i] for i in ids]
            if cfg.augment:
                batch = [augment(s, sample_rng(cfg.seed, i, epoch), size) for s, i in zip(batch, ids)]
            labels = [s.label for s in batch]
            x = Tensor(encode_batch([s.image for s in batch], channels))
            lr = lr_at(epoch + b / num_batches, cfg)
            model.zero_grad()
            logits = model(x)
            loss = bce_loss(logits, one_hot(labels, k))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(params, {n: p.grad for n, p in params.items()}, state, lr,
                      cfg.beta1, cfg.beta2, cfg.eps)
            loss_sum += value * len(batch)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            seen += len(batch)

        lr_end = lr_at(epoch + 1, cfg)
        test_loss, test_acc = evaluate(model, test_samples, channels)
        records = [
            {"epoch": epoch, "split": "train", "loss": loss_sum / seen, "accuracy": correct / seen, "lr": lr_end},
            {"epoch": epoch, "split": "test", "loss": test_loss, "accuracy": test_acc, "lr": lr_end},
        ]
        state.history.extend(records)
        log.info("epoch %d train loss %.4f acc %.3f | test loss %.4f acc %.3f",
                 epoch, records[0]["loss"], records[0]["accuracy"], test_loss, test_acc)
        if out is not None:
            with metrics_path.open("a") as fh:
                for r in records:
                    fh.write(json.dumps(r) + "\n")
        if test_acc > state.best_accuracy:
            state.best_accuracy, state.best_epoch = test_acc, epoch
            if out is not None:
                save_checkpoint(model, out / "best.hxb")
        if on_epoch is not None:
            on_epoch(epoch, records)

    if out is not None:
        save_checkpoint(model, out / "last.hxb")
        (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return state


def epoch_losses(state: TrainState, split: str = "train") -> list[float]:
    return [r["loss"] for r in state.history if r["split"] == split]
