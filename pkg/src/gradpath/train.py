"""Toy-scale training: synthetic data, momentum SGD, loss curves, manifests.

The synthetic task is class-conditional shapes: each class owns a primitive
(disc, square, triangle, cross, ring, bar) and a base colour, drawn at a
random position and scale over a noisy background. Everything derives from a
single ``numpy`` generator seeded by the caller, so datasets and training runs
are bit-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .archspec import ArchSpec, dumps
from .autodiff import backward, forward, init_params
from .graph import CompGraph, validate

SHAPES = ("disc", "square", "triangle", "cross", "ring", "bar")
COLORS = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9], [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.8], [0.2, 0.8, 0.8], [0.95, 0.55, 0.2], [0.6, 0.6, 0.6],
])


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, 3, size, size) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, k)
    seed: int
    k: int

    def __len__(self) -> int:
        return len(self.labels)

    def downsample(self, factor: int) -> "SyntheticDataset":
        """Average-pool the images by an integer factor."""
        if factor == 1:
            return self
        n, c, h, w = self.images.shape
        if h % factor or w % factor:
            raise ValueError(f"{h}x{w} images are not divisible by {factor}")
        pooled = self.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
        return SyntheticDataset(pooled, self.labels, self.seed, self.k)

    def split(self, val_fraction: float, seed: int):
        """Deterministic stratified train/validation split."""
        rng = np.random.default_rng(seed)
        train_idx, val_idx = [], []
        for c in range(self.k):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(len(idx))]
            n_val = int(round(val_fraction * len(idx)))
            val_idx.append(idx[:n_val])
            train_idx.append(idx[n_val:])
        tr, va = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
        return (SyntheticDataset(self.images[tr], self.labels[tr], self.seed, self.k),
                SyntheticDataset(self.images[va], self.labels[va], self.seed, self.k))


def _shape_mask(kind: str, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if kind == "triangle":
        return (v <= r * 0.7) & (v >= -r * 0.7 + 1.7 * np.abs(u))
    if kind == "cross":
        return ((np.abs(u) <= r * 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= r * 0.3) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.3)
    raise ValueError(kind)


def generate(seed: int, n: int, k: int, size: int = 32) -> SyntheticDataset:
    if not (n >= k >= 2):
        raise ValueError("need n >= k >= 2")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k).astype(np.int64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, 3, size, size))
    for i, c in enumerate(labels):
        kind = SHAPES[c % len(SHAPES)]
        color = COLORS[(c // len(SHAPES) + 3 * c) % len(COLORS)]
        r = rng.uniform(0.18, 0.32) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        angle = rng.uniform(-0.4, 0.4)
        bg = rng.uniform(0.0, 0.3, size=3)
        img = bg[:, None, None] + rng.normal(0.0, 0.04, size=(3, size, size))
        m = _shape_mask(kind, yy, xx, cy, cx, r, angle)
        tint = np.clip(color + rng.normal(0.0, 0.05, size=3), 0.0, 1.0)
        img[:, m] = tint[:, None]
        images[i] = np.clip(img, 0.0, 1.0)
    return SyntheticDataset(images, labels, seed, k)


def load_image_folder(root, size: int = 32) -> SyntheticDataset:
    """Hook for external data: ``root/<class name>/<image>``, classes in
    sorted order. Images are converted to RGB and resized to ``size``."""
    from PIL import Image  # optional dependency

    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ValueError("need at least two class folders")
    imgs, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if not f.is_file():
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB").resize((size, size)), dtype=np.float64) / 255.0
            imgs.append(arr.transpose(2, 0, 1))
            labels.append(c)
    return SyntheticDataset(np.stack(imgs), np.array(labels, dtype=np.int64), -1, len(classes))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.1
    seed: int = 0
    momentum: float = 0.9
    val_fraction: float = 0.2
    downsample: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.downsample < 1:
            raise ValueError("epochs, batch_size and downsample must be positive")
        # lr = 0 is allowed: it is the no-update control run
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ValueError("lr must be a finite non-negative number")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainResult:
    status: str  # "ok" or "diverged"
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    params: Optional[dict] = field(default=None, repr=False)

    @property
    def final_loss(self) -> float:
        return self.train_loss[-1] if self.train_loss else float("nan")

    @property
    def final_accuracy(self) -> float:
        return self.val_acc[-1] if self.val_acc else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for e, (l, a) in enumerate(zip(self.train_loss, self.val_acc), start=1):
            w.writerow([e, repr(l), repr(a)])
        return buf.getvalue()


def _evaluate(graph, params, data: SyntheticDataset, chunk: int = 256):
    total, correct = 0.0, 0
    for lo in range(0, len(data), chunk):
        x, y = data.images[lo : lo + chunk], data.labels[lo : lo + chunk]
        fwd = forward(graph, params, x, y)
        total += fwd.loss * len(y)
        correct += int(np.sum(fwd.output.data.mean(axis=(2, 3)).argmax(axis=1) == y))
    return total / len(data), correct / len(data)


def train(graph: CompGraph, dataset: SyntheticDataset, config: TrainConfig) -> TrainResult:
    """Momentum SGD on cross-entropy. Reports ``train_loss`` (full training
    split, after each epoch) and ``val_acc`` per epoch. A non-finite loss or
    parameter stops the run with status ``"diverged"``."""
    res = validate(graph)
    if not res.ok:
        raise ValueError("invalid graph: " + "; ".join(res.violations))
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    loss_in = graph.in_channels(graph.loss_id)[0]
    if loss_in != dataset.k:
        raise ValueError(f"graph emits {loss_in} channels for {dataset.k} classes")
    data = dataset.downsample(config.downsample)
    tr, va = data.split(config.val_fraction, config.seed)
    params = init_params(graph, config.seed)
    vel = {nid: {k: np.zeros_like(a) for k, a in p.items()} for nid, p in params.items()}
    rng = np.random.default_rng(config.seed + 1)
    out = TrainResult("ok", params=params)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for _ in range(config.epochs):
            order = rng.permutation(len(tr))
            for lo in range(0, len(order), config.batch_size):
                idx = order[lo : lo + config.batch_size]
                fwd = forward(graph, params, tr.images[idx], tr.labels[idx])
                if not np.isfinite(fwd.loss):
                    out.status = "diverged"
                    return out
                grads = backward(fwd.tape).grads
                finite = True
                for nid, p in params.items():
                    for key in ("w", "b"):
                        v = vel[nid][key]
                        v *= config.momentum
                        v += grads[nid][key]
                        p[key] -= config.lr * v
                        finite = finite and bool(np.all(np.isfinite(p[key])))
                if not finite:
                    out.status = "diverged"
                    return out
            loss, _ = _evaluate(graph, params, tr)
            if not np.isfinite(loss):
                out.status = "diverged"
                return out
            _, acc = _evaluate(graph, params, va)
            out.train_loss.append(loss)
            out.val_acc.append(acc)
    return out


def manifest(spec: Optional[ArchSpec], config: TrainConfig, seed: int, graph: CompGraph) -> dict:
    return {
        "spec": dumps(spec) if spec is not None else None,
        "config": asdict(config),
        "seed": seed,
        "graph_hash": graph.content_hash(),
    }


# -- directional experiments ------------------------------------------------

# 32x32 renders average-pooled to 8x8 keep a CPU run to seconds per model
TOY_DATA = dict(n=600, k=4, size=32)
TOY_CONFIG = TrainConfig(epochs=10, batch_size=32, lr=0.02, momentum=0.9, downsample=4)
DEEP_DATA = dict(n=480, k=4, size=32)
DEEP_CONFIG = TrainConfig(epochs=5, batch_size=32, lr=0.02, momentum=0.9, downsample=4)


def _median(values) -> float:
    return statistics.median(values)


def _toy_shape(data: dict, config: TrainConfig) -> tuple:
    side = data["size"] // config.downsample
    return (3, side, side)


def _warn(notes) -> None:
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=3)


def stop_grad_ablation(seeds=(1, 2, 3), base: Optional[ArchSpec] = None,
                       config: TrainConfig = TOY_CONFIG, data: Optional[dict] = None) -> dict:
    """Train ResNet with stop_grad off / on_identity / on_block per seed.

    Returns ``{"runs": {mode: [TrainResult, ...]}, "median_acc": {...},
    "warnings": [...]}``. A violated direction is a warning, not an error.
    """
    from .zoo import build

    data = data or TOY_DATA
    if base is None:
        base = ArchSpec("ResNet", depth=(3,), base_channels=8,
                        input_shape=_toy_shape(data, config), num_classes=data["k"])
    runs = {m: [] for m in ("off", "on_identity", "on_block")}
    for seed in seeds:
        ds = generate(seed, data["n"], data["k"], data["size"])
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        for mode in runs:
            runs[mode].append(train(build(base.with_(stop_grad=mode)), ds, cfg))
    med = {m: _median([r.final_accuracy for r in rs]) for m, rs in runs.items()}
    notes = [
        f"stop-grad ablation: off median acc {med['off']:.3f} < {mode} {med[mode]:.3f} "
        f"(seeds {list(seeds)})"
        for mode in ("on_identity", "on_block") if med["off"] < med[mode]
    ]
    _warn(notes)
    return {"runs": runs, "median_acc": med, "warnings": notes}


def deep_vovnet_vs_replanned(seeds=(1, 2, 3), modules: int = 12, osa_layers: int = 2,
                             config: TrainConfig = DEEP_CONFIG, data: Optional[dict] = None) -> dict:
    """Stacked-OSA VoVNet against its ELAN-style replanned twin (same convs,
    intermediate transitions removed). Compares median final training loss."""
    from .zoo import build

    data = data or DEEP_DATA
    base = ArchSpec("VoVNet", depth=(modules,), base_channels=8, osa_layers=osa_layers,
                    input_shape=_toy_shape(data, config), num_classes=data["k"])
    runs = {"stacked": [], "replanned": []}
    for seed in seeds:
        ds = generate(seed, data["n"], data["k"], data["size"])
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        runs["stacked"].append(train(build(base), ds, cfg))
        runs["replanned"].append(train(build(base.with_(replan=True)), ds, cfg))
    med = {m: _median([r.final_loss for r in rs]) for m, rs in runs.items()}
    notes = []
    if not med["replanned"] <= med["stacked"]:
        notes.append(f"deep VoVNet: replanned median loss {med['replanned']:.4f} > stacked "
                     f"{med['stacked']:.4f} (seeds {list(seeds)})")
    _warn(notes)
    return {"runs": runs, "median_loss": med, "warnings": notes}
