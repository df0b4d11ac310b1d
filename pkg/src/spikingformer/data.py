"""Datasets: CIFAR-10 binary files plus synthetic desk-scale generators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels
CIFAR_CLASSES = 10

KIND_STATIC = "static-image"
KIND_EVENTS = "event-frames"
KIND_SYNTHETIC = "synthetic"


@dataclass
class Dataset:
    """Samples plus geometry. Static x: [n, C, H, W]; events: [n, T, C, H, W]."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    kind: str

    def __len__(self):
        return len(self.y)

    @property
    def geometry(self):
        return self.x.shape[-3:]


def load_cifar10_binary(path, limit=None) -> Dataset:
    """Read a CIFAR-10 binary batch file (3073-byte records, pixels in [0,1])."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= CIFAR_CLASSES:
        raise ValueError(f"{path}: label {labels.max()} out of range for CIFAR-10")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(x=pixels, y=labels, num_classes=CIFAR_CLASSES, kind=KIND_STATIC)


def write_cifar10_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the loader (round-trip oracle and fixture synthesis)."""
    n = len(labels)
    out = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = np.rint(images.reshape(n, -1) * 255.0).astype(np.uint8)
    out.tofile(path)


def class_templates(classes: int, shape, seed: int) -> np.ndarray:
    """Per-class spatial intensity templates with pairwise distinct means."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    templates = np.zeros((classes, c, h, w), dtype=np.float32)
    for cls in range(classes):
        base = rng.uniform(0.0, 1.0, size=(c, h, w)).astype(np.float32)
        # carve a bright class-specific block so classes stay far apart
        bh, bw = max(1, h // 2), max(1, w // 2)
        r = (cls * bh) % max(1, h - bh + 1)
        q = (cls * bw + cls // 2) % max(1, w - bw + 1)
        base[:, r : r + bh, q : q + bw] = 0.9 + 0.1 * (cls % 2)
        templates[cls] = 0.5 * base
    return templates


def synth_static(classes: int, n: int, seed: int, shape=(3, 8, 8), noise: float = 0.05) -> Dataset:
    """Linearly separable static images: class template + gaussian noise."""
    rng = np.random.default_rng(seed)
    templates = class_templates(classes, shape, seed=seed * 7919 + 13)
    y = rng.integers(0, classes, size=n)
    x = templates[y]
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape).astype(np.float32)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Dataset(x=x, y=y.astype(np.int64), num_classes=classes, kind=KIND_SYNTHETIC)


def synth_events(classes: int, n: int, t_steps: int, seed: int, shape=(2, 8, 8)) -> Dataset:
    """Binary event frames with class-dependent firing-rate patterns."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    if c != 2:
        raise ValueError("event frames use C=2 (on/off polarities)")
    templates = class_templates(classes, shape, seed=seed * 104729 + 17)
    rates = templates / templates.max()
    y = rng.integers(0, classes, size=n)
    p = rates[y][:, None]  # [n, 1, C, H, W] broadcast over T
    x = (rng.uniform(size=(n, t_steps, c, h, w)) < p).astype(np.float32)
    return Dataset(x=x, y=y.astype(np.int64), num_classes=classes, kind=KIND_EVENTS)


def template_matching_accuracy(ds: Dataset, templates: np.ndarray) -> float:
    """Linear-classifier oracle: argmax_c <x, t_c> - |t_c|^2 / 2."""
    flat = ds.x.reshape(len(ds), -1)
    tflat = templates.reshape(len(templates), -1)
    scores = flat @ tflat.T - 0.5 * (tflat ** 2).sum(axis=1)
    return float((scores.argmax(axis=1) == ds.y).mean())
