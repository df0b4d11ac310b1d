"""Surrogate-gradient BPTT training: optimizer, loop, metrics, checkpoints."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import Model, ModelConfig, build
from .tensor import Tensor, log_softmax

CHECKPOINT_MAGIC = b"SPKF"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps)
                                    + cfg.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logp * Tensor(onehot)).sum() * (1.0 / len(labels))


def train(model: Model, dataset: Dataset, cfg: TrainConfig, metrics_path=None):
    """Train in place; returns the per-step metrics log.

    Static images are repeated across T inside the model's forward; event
    datasets feed their own leading T axis.
    """
    rng = np.random.default_rng(cfg.seed)
    model.train()
    optimizer = AdamW(model.parameters(), cfg)
    n = len(dataset)
    steps_per_epoch = max(1, n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    metrics = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = dataset.x[idx], dataset.y[idx]
            if dataset.kind == "event-frames":
                xb = np.moveaxis(xb, 0, 1)  # [B, T, ...] -> [T, B, ...]
            logits = model.forward(xb)
            loss = cross_entropy(logits, yb)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at epoch {epoch} step {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            lr = cosine_lr(cfg.lr, step, total_steps)
            optimizer.step(lr)
            acc = float((logits.data.argmax(axis=1) == yb).mean())
            metrics.append({"epoch": epoch, "step": step, "loss": loss_val,
                            "acc": acc, "lr": lr})
            step += 1
    if metrics_path is not None:
        write_metrics_csv(metrics, metrics_path)
    return metrics


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.x[start : start + batch_size]
        yb = dataset.y[start : start + batch_size]
        if dataset.kind == "event-frames":
            xb = np.moveaxis(xb, 0, 1)
        logits = model.forward(xb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(dataset)


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "acc", "lr"])
        for row in metrics:
            writer.writerow([row["epoch"], row["step"],
                             repr(row["loss"]), repr(row["acc"]), repr(row["lr"])])


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Binary format: magic, u32 version, u32 count; per tensor a u32 name
    length, UTF-8 name, u8 rank, u32 dims, little-endian f32 payload."""
    state = model.state()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
            payload = fh.read(n_bytes)
            if len(payload) != n_bytes:
                raise ValueError(f"truncated payload for tensor {name!r}")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return state


def load_checkpoint(path, config: ModelConfig, fused: bool = False) -> Model:
    model = build(config)
    if fused:
        model.fuse()
    model.load_state(read_checkpoint(path))
    return model
