"""Weak-supervision training loop.

Trains the probe as a bug detector from sample-level labels only. The
training input type deliberately has no buggy-lines field, so line-level
ground truth cannot leak into optimization even by accident.

Variable-length sequences are handled by running one sample at a time and
accumulating gradients over the batch, which is exactly equivalent to
optimizing the mean batch loss and avoids padded-softmax semantics. The
optimizer is Adam with decoupled weight decay; plain SGD is available for
ablation. Checkpoint selection is by validation detection accuracy, ties
going to the earlier epoch. Fixed seeds make the whole run bit-reproducible
on one machine.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import BugprobeError
from .probe import ProbeConfig, ProbeModel, forward, init
from .repstore import Manifest, RepRecord

# Seed-derivation tags: keep stable or every seeded run changes.
_SPLIT_TAG = 100
_EPOCH_TAG = 101


class TrainError(BugprobeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 1.0
    val_fraction: float = 0.2
    seed: int = 0
    optimizer: str = "adamw"  # "adamw" or "sgd"

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise TrainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.val_fraction < 1:
            raise TrainError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.optimizer not in ("adamw", "sgd"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainSample:
    """What the trainer is allowed to see: representations and the binary label."""

    sample_id: str
    data: np.ndarray
    token_line: np.ndarray
    label: int


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    selected_epoch: int = 0  # 1-based
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay (decay applied to the parameter, not the gradient)."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


class SGD:
    """Plain gradient descent with the same decoupled decay convention."""

    def __init__(self, params: Sequence[ad.Tensor], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            p.data -= (self.lr * p.grad.astype(np.float64)).astype(p.data.dtype)


def sample_from_record(record: RepRecord) -> TrainSample:
    return TrainSample(sample_id=record.sample_id, data=record.data,
                       token_line=record.token_line, label=record.label)


def load_training_set(manifest: Manifest,
                      base_dir=None) -> list[TrainSample]:
    """Materialize a manifest as training samples, dropping ground truth.

    Rejects mixed hidden dimensions or mixed source layers: a probe is
    trained per layer on one representation space.
    """
    samples = []
    dims: set[int] = set()
    layers: set[int] = set()
    for record in manifest.records(base_dir):
        dims.add(record.d)
        layers.add(record.layer_k)
        samples.append(sample_from_record(record))
    if len(dims) > 1:
        raise TrainError(f"mixed hidden dimensions in dataset: {sorted(dims)}")
    if len(layers) > 1:
        raise TrainError(f"mixed source layers in dataset: {sorted(layers)}")
    return samples


def split(items: Sequence[tuple[str, int]], val_fraction: float,
          seed: int) -> tuple[list[str], list[str]]:
    """Stratified train/validation split of (sample_id, label) pairs.

    Deterministic in the seed; each class contributes round(fraction * n)
    validation samples, at least 1 and at most n - 1.
    """
    if not 0 < val_fraction < 1:
        raise TrainError(f"val_fraction must be in (0, 1), got {val_fraction}")
    by_label: dict[int, list[str]] = {}
    for sid, label in items:
        by_label.setdefault(int(label), []).append(sid)
    for label, ids in sorted(by_label.items()):
        if len(ids) < 2:
            raise TrainError(
                f"label {label} has only {len(ids)} sample(s); need at least 2 per class")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _SPLIT_TAG))))
    train_ids: list[str] = []
    val_ids: list[str] = []
    for label in sorted(by_label):
        ids = by_label[label]
        perm = rng.permutation(len(ids))
        n_val = int(math.floor(val_fraction * len(ids) + 0.5))
        n_val = min(max(n_val, 1), len(ids) - 1)
        val_ids.extend(ids[i] for i in perm[:n_val])
        train_ids.extend(ids[i] for i in perm[n_val:])
    return train_ids, val_ids


def _detection_accuracy(model: ProbeModel, samples: Iterable[TrainSample]) -> float:
    correct = 0
    total = 0
    for s in samples:
        prob = ad.sigmoid_value(forward(model, s.data).logit_value)
        correct += int((prob >= 0.5) == bool(s.label))
        total += 1
    return correct / total if total else 0.0


def train(probe_config: ProbeConfig, train_config: TrainConfig,
          samples: Sequence[TrainSample]) -> tuple[ProbeModel, TrainReport]:
    """Train a probe on detection labels; returns the best-validation checkpoint."""
    if not samples:
        raise TrainError("empty dataset")
    dims = {s.data.shape[1] for s in samples}
    if len(dims) > 1:
        raise TrainError(f"mixed hidden dimensions in dataset: {sorted(dims)}")
    if dims != {probe_config.d_in}:
        raise TrainError(
            f"dataset dimension {sorted(dims)} does not match probe d_in={probe_config.d_in}")

    started = time.perf_counter()
    by_id = {s.sample_id: s for s in samples}
    if len(by_id) != len(samples):
        raise TrainError("duplicate sample ids in dataset")
    train_ids, val_ids = split([(s.sample_id, s.label) for s in samples],
                               train_config.val_fraction, train_config.seed)
    train_set = [by_id[i] for i in train_ids]
    val_set = [by_id[i] for i in val_ids]

    model = init(probe_config, dtype=np.float32)
    opt_cls = AdamW if train_config.optimizer == "adamw" else SGD
    opt = opt_cls(model.parameters(), lr=train_config.learning_rate,
                  weight_decay=train_config.weight_decay)

    report = TrainReport()
    best_acc = -1.0
    best_state = model.copy_state()
    for epoch in range(1, train_config.epochs + 1):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((train_config.seed, _EPOCH_TAG, epoch))))
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = [train_set[i] for i in order[start:start + train_config.batch_size]]
            opt.zero_grad()
            for s in batch:
                out = forward(model, s.data)
                loss = ad.bce_with_logits(out.logit, s.label)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainError(
                        f"non-finite loss on sample {s.sample_id!r} at epoch {epoch}")
                epoch_loss += value
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
        report.train_loss.append(epoch_loss / len(train_set))
        acc = _detection_accuracy(model, val_set)
        report.val_accuracy.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_state = model.copy_state()
            report.selected_epoch = epoch

    model.load_state(best_state)
    report.wall_seconds = time.perf_counter() - started
    return model, report


@dataclass
class SweepResult:
    rows: list[tuple[int, float]]
    best_layer: int


def layer_sweep(layers: Sequence[int],
                load_samples: Callable[[int], Sequence[TrainSample]],
                probe_config: ProbeConfig, train_config: TrainConfig) -> SweepResult:
    """Train one probe per candidate source layer; pick the best validation accuracy.

    Ties go to the smaller layer index. All runs share the configured seed.
    """
    if not layers:
        raise TrainError("no candidate layers")
    rows: list[tuple[int, float]] = []
    for layer in layers:
        _, report = train(probe_config, train_config, load_samples(layer))
        rows.append((layer, report.val_accuracy[report.selected_epoch - 1]))
    best_layer = min(rows, key=lambda r: (-r[1], r[0]))[0]
    return SweepResult(rows=rows, best_layer=best_layer)
