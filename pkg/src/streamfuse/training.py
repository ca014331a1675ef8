"""Siamese + identity training for sequence pairs.

One network serves both branches, so its parameters accumulate gradient from
the pair distance term and from both per-sequence identity terms in a single
backward pass.  Pair sampling alternates positive and negative pairs; all
randomness comes from one seeded generator so a run is a pure function of
(seed, data, config).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .network import AttentionParams, Network, temporal_pool


class TrainingError(ValueError):
    """Raised when the dataset or configuration cannot support training."""


@dataclass
class PairBatch:
    """A positive or negative pair of sequences with identity labels.

    Positive pairs hold one person seen from two different cameras; labels are
    indices into the training identity set.
    """

    seq_a: object
    seq_b: object
    same_identity: bool
    label_a: int
    label_b: int

    def __post_init__(self):
        if self.same_identity != (self.label_a == self.label_b):
            raise TrainingError(
                f"pair labels {self.label_a}, {self.label_b} contradict same_identity={self.same_identity}"
            )


@dataclass
class TrainConfig:
    """Optimization schedule.

    Defaults follow the full-scale protocol (1200 epochs, rate halved after
    epoch 800); ``desk_config`` scales the schedule down for synthetic runs.
    """

    margin: float = 4.0
    lr: float = 2e-3
    lr_decay: float = 0.5
    lr_decay_epoch: int = 800
    epochs: int = 1200
    train_seq_len: int = 16
    test_seq_len: int = 128
    momentum: float = 0.0
    steps_per_epoch: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainingError(f"margin must be positive, got {self.margin}")
        if self.lr <= 0:
            raise TrainingError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.train_seq_len < 1 or self.test_seq_len < 1:
            raise TrainingError("epochs and sequence lengths must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainingError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_decay <= 0:
            raise TrainingError(f"lr_decay must be positive, got {self.lr_decay}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise TrainingError(
                f"steps_per_epoch must be positive when set, got {self.steps_per_epoch}"
            )


def desk_config(**overrides) -> TrainConfig:
    """Short schedule for desk-scale synthetic experiments."""
    base = dict(epochs=300, lr_decay_epoch=200)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch: one decay after the configured epoch."""
    if epoch > cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay
    return cfg.lr


@dataclass
class TraceRow:
    epoch: int
    step: int
    siamese: float
    identity_i: float
    identity_j: float
    total: float
    lr: float


TRACE_COLUMNS = ("epoch", "step", "siamese", "identity_i", "identity_j", "total", "lr")


def trace_to_csv(rows: list[TraceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in rows:
        writer.writerow([r.epoch, r.step,
                         f"{r.siamese:.12g}", f"{r.identity_i:.12g}", f"{r.identity_j:.12g}",
                         f"{r.total:.12g}", f"{r.lr:.12g}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def siamese_loss(v_i: Tensor, v_j: Tensor, same: bool, m: float) -> Tensor:
    """Squared distance for positives; hinge max(0, m - squared distance) otherwise."""
    if v_i.shape != v_j.shape:
        raise ad.ShapeError(f"pair features differ in shape: {list(v_i.shape)} vs {list(v_j.shape)}")
    d = ad.sub(v_i, v_j)
    sq = ad.sum_all(ad.mul(d, d))
    if same:
        return sq
    gap = ad.sub(Tensor(np.array([float(m)])), sq)
    return ad.relu(gap)


def identity_loss(logits: Tensor, label: int) -> Tensor:
    """Cross entropy of a softmax over identity logits: -log softmax(logits)[label]."""
    n = logits.shape[0]
    if logits.data.ndim != 1 or n < 2:
        raise ad.ShapeError(f"logits must be a vector over >= 2 classes, got shape {list(logits.shape)}")
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    return ad.scale(ad.take(ad.log_softmax(logits), label), -1.0)


def total_objective(v_i: Tensor, v_j: Tensor, same: bool, labels: tuple[int, int],
                    logits_i: Tensor, logits_j: Tensor, m: float) -> Tensor:
    """Unweighted sum: pair term plus one identity term per sequence."""
    e = siamese_loss(v_i, v_j, same, m)
    li = identity_loss(logits_i, labels[0])
    lj = identity_loss(logits_j, labels[1])
    return ad.add(ad.add(e, li), lj)


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------

def _index_train_set(samples) -> tuple[list, dict, dict]:
    ids = sorted({s.person_id for s in samples})
    label_of = {pid: i for i, pid in enumerate(ids)}
    by_id: dict = {pid: [] for pid in ids}
    for s in samples:
        by_id[s.person_id].append(s)
    for pid in ids:
        by_id[pid].sort(key=lambda s: (s.camera_id,))
    return ids, label_of, by_id


def sample_pair(rng: np.random.Generator, ids: list, label_of: dict, by_id: dict,
                positive: bool) -> PairBatch:
    """Draw one pair; positives pair two cameras of one person."""
    if positive:
        pid = ids[rng.integers(len(ids))]
        group = by_id[pid]
        cams = sorted({s.camera_id for s in group})
        ca, cb = rng.choice(len(cams), size=2, replace=False)
        pool_a = [s for s in group if s.camera_id == cams[ca]]
        pool_b = [s for s in group if s.camera_id == cams[cb]]
        seq_a = pool_a[rng.integers(len(pool_a))]
        seq_b = pool_b[rng.integers(len(pool_b))]
        return PairBatch(seq_a, seq_b, True, label_of[pid], label_of[pid])
    ia, ib = rng.choice(len(ids), size=2, replace=False)
    pid_a, pid_b = ids[ia], ids[ib]
    group_a = by_id[pid_a]
    seq_a = group_a[rng.integers(len(group_a))]
    other_cam = [s for s in by_id[pid_b] if s.camera_id != seq_a.camera_id]
    pool_b = other_cam if other_cam else by_id[pid_b]
    seq_b = pool_b[rng.integers(len(pool_b))]
    return PairBatch(seq_a, seq_b, False, label_of[pid_a], label_of[pid_b])


def _window(rng: np.random.Generator, frames: list, length: int) -> list:
    t = len(frames)
    n = min(length, t)
    offset = int(rng.integers(0, t - n + 1))
    return frames[offset:offset + n]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(net: Network, data, cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, Network, list], bool]] = None) -> list[TraceRow]:
    """Optimize the network in place; returns the per-step loss trace.

    Each step draws one pair (alternating positive/negative within an epoch),
    cuts a random window of ``train_seq_len`` consecutive frames from both
    sequences, and applies one gradient-descent update at the scheduled rate.
    ``on_epoch(epoch, net, trace)`` may return True to stop early.
    """
    ids, label_of, by_id = _index_train_set(data.train)
    if len(ids) < 2:
        raise TrainingError(f"training needs >= 2 identities, found {len(ids)}")
    for pid in ids:
        cams = {s.camera_id for s in by_id[pid]}
        if len(cams) < 2:
            raise TrainingError(
                f"identity {pid!r} appears under {len(cams)} camera(s); need >= 2 for positive pairs"
            )

    net.ensure_classifier(len(ids), seed=cfg.seed)
    params = net.parameters()
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps_per_epoch if cfg.steps_per_epoch is not None else len(ids)
    velocity = {name: np.zeros_like(t.data) for name, t in params} if cfg.momentum > 0 else None
    attn = AttentionParams(net.param("attn.u")) if net.config.temporal_pool == "attentive" else None

    trace: list[TraceRow] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        for step in range(1, steps + 1):
            pair = sample_pair(rng, ids, label_of, by_id, positive=(step % 2 == 1))
            wa = _window(rng, pair.seq_a.frames, cfg.train_seq_len)
            wb = _window(rng, pair.seq_b.frames, cfg.train_seq_len)
            with Tape() as tape:
                ha = net.forward_sequence(wa)
                hb = net.forward_sequence(wb)
                if attn is not None:
                    v_a, v_b = temporal_pool("attentive", ha, hb, attn)
                else:
                    v_a, v_b = temporal_pool("mean", ha, hb)
                e = siamese_loss(v_a, v_b, pair.same_identity, cfg.margin)
                li = identity_loss(net.classify(v_a), pair.label_a)
                lj = identity_loss(net.classify(v_b), pair.label_b)
                loss = ad.add(ad.add(e, li), lj)
                grads = backward(tape, loss)
            row = TraceRow(epoch, step, e.item(), li.item(), lj.item(), loss.item(), lr)
            trace.append(row)
            if not np.isfinite(row.total):
                raise TrainingError(f"loss diverged at epoch {epoch} step {step}: {row.total}")
            for name, t in params:
                g = grads.get(t)
                gdata = g.data if g is not None else 0.0
                if velocity is not None:
                    velocity[name] = cfg.momentum * velocity[name] + gdata
                    t.data -= lr * velocity[name]
                else:
                    t.data = t.data - lr * gdata
        if on_epoch is not None and on_epoch(epoch, net, trace):
            break
    return trace
