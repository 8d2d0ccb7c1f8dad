"""Supervised encoder pretraining with an optional auxiliary triplet objective.

The classification loss is label-smoothed cross-entropy over the dataset's
classes through a temporary linear head; the triplet term pulls same-class
embeddings together and pushes different-class embeddings apart:

    max(0, ||a - p||^2 - ||a - n||^2 + margin)

combined as  total = class_loss + weight * triplet_loss. Triplets are mined
in-batch; batches are composed as P classes x K samples so valid triplets
always exist.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .datasets import AugmentParams, LabeledImageSet, preprocess
from .encoders import Encoder, images_to_tensor
from .errors import NumericError, TrainingDiverged, ValidationError
from .seeding import derive_seed, make_rng, torch_generator

MINING_STRATEGIES = ("all", "semi_hard", "hardest_negative")


@dataclass(frozen=True)
class TripletParams:
    margin: float = 0.2
    weight: float = 0.5
    mining: str = "semi_hard"
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.weight < 0:
            raise ValidationError("weight must be >= 0")
        if self.mining not in MINING_STRATEGIES:
            raise ValidationError(f"mining must be one of {MINING_STRATEGIES}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    classes_per_batch: int = 8   # P
    samples_per_class: int = 4   # K
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    label_smoothing: float = 0.1
    triplet: TripletParams | None = None
    augment: AugmentParams | None = None
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must lie in [0, 1)")
        if self.triplet is not None and (self.classes_per_batch < 2 or self.samples_per_class < 2):
            raise ValidationError("triplet mining requires P >= 2 and K >= 2")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in [0, 1)")


def cross_entropy_smoothed(logits, target, smoothing: float) -> torch.Tensor:
    """Label-smoothed cross-entropy for one logit vector or a batch.

    The target distribution puts 1 - eps + eps/C on the true class and
    eps/C everywhere else. Returns the mean over the batch.
    """
    logits = torch.as_tensor(logits)
    if logits.dim() == 1:
        logits = logits[None]
        target = torch.as_tensor([target])
    target = torch.as_tensor(target, dtype=torch.long)
    c = logits.shape[-1]
    if c < 2:
        raise ValidationError("cross entropy needs at least 2 classes")
    if not 0.0 <= smoothing < 1.0:
        raise ValidationError("smoothing must lie in [0, 1)")
    if target.min() < 0 or target.max() >= c:
        raise ValidationError(f"target out of range [0, {c})")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    logp = logits.log_softmax(dim=-1)
    nll = -logp.gather(-1, target[:, None]).squeeze(-1)
    uniform = -logp.mean(dim=-1)
    return ((1.0 - smoothing) * nll + smoothing * uniform).mean()


def triplet_loss(anchor, positive, negative, margin: float) -> torch.Tensor:
    """max(0, ||a-p||^2 - ||a-n||^2 + margin) with squared Euclidean distances.

    Accepts single vectors or (T, d) batches; returns the mean over the batch.
    """
    def as_batch(x):
        t = x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))
        return t[None] if t.dim() == 1 else t

    a, p, n = as_batch(anchor), as_batch(positive), as_batch(negative)
    if not (a.shape == p.shape == n.shape):
        raise ValidationError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if margin < 0:
        raise ValidationError("margin must be >= 0")
    d_ap = (a - p).square().sum(dim=-1)
    d_an = (a - n).square().sum(dim=-1)
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


def combined_loss(class_loss, triplet_loss_mean, weight: float):
    """total = class + weight * triplet."""
    return class_loss + weight * triplet_loss_mean


def mine_triplets(embeddings, labels, strategy: str = "semi_hard", margin: float = 0.2):
    """Return (anchor, positive, negative) index triples from a batch.

    `all` enumerates every valid ordered (a, p) pair with every negative.
    `semi_hard` keeps, per (a, p), the hardest negative inside the margin
    window d(a,p) < d(a,n) < d(a,p) + margin, falling back to the hardest
    negative overall when the window is empty. `hardest_negative` keeps the
    minimum-distance negative per (a, p). Ties break toward the lower index.
    Batches without a valid (same-class pair, other-class sample) yield [].
    """
    if strategy not in MINING_STRATEGIES:
        raise ValidationError(f"unknown mining strategy {strategy!r}")
    emb = embeddings.detach().cpu().numpy() if torch.is_tensor(embeddings) else np.asarray(embeddings)
    labels = np.asarray(labels)
    b = emb.shape[0]
    if b < 3:
        raise ValidationError("mining needs a batch of at least 3 embeddings")

    dist = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
    triplets = []
    for a in range(b):
        negatives = np.nonzero(labels != labels[a])[0]
        if negatives.size == 0:
            continue
        for p in range(b):
            if p == a or labels[p] != labels[a]:
                continue
            if strategy == "all":
                triplets.extend((a, p, int(n)) for n in negatives)
                continue
            d_ap = dist[a, p]
            d_an = dist[a, negatives]
            if strategy == "semi_hard":
                window = negatives[(d_an > d_ap) & (d_an < d_ap + margin)]
                if window.size:
                    chosen = window[np.argmin(dist[a, window])]
                else:
                    chosen = negatives[np.argmin(d_an)]
            else:  # hardest_negative
                chosen = negatives[np.argmin(d_an)]
            triplets.append((a, p, int(chosen)))
    return triplets


def triplet_loss_from_batch(embeddings: torch.Tensor, labels, params: TripletParams) -> torch.Tensor:
    """Mean triplet loss over mined in-batch triplets (0 when none exist)."""
    if params.normalize_embeddings:
        embeddings = torch.nn.functional.normalize(embeddings, dim=-1)
    triplets = mine_triplets(embeddings, labels, params.mining, params.margin)
    if not triplets:
        return embeddings.new_zeros(())
    idx = torch.as_tensor(triplets, dtype=torch.long)
    return triplet_loss(embeddings[idx[:, 0]], embeddings[idx[:, 1]], embeddings[idx[:, 2]], params.margin)


def _train_val_split(dataset: LabeledImageSet, val_fraction: float, seed: int):
    """Per-class item split; every class keeps at least one training item."""
    train_idx, val_idx = [], []
    for c in range(dataset.n_classes):
        pool = dataset.indices_of_class(c)
        order = make_rng(seed, "pretrain-val", c).permutation(len(pool))
        n_val = int(math.floor(val_fraction * len(pool)))
        n_val = min(n_val, len(pool) - 1)
        val_idx.extend(pool[order[:n_val]])
        train_idx.extend(pool[order[n_val:]])
    return np.array(train_idx, dtype=np.int64), np.array(val_idx, dtype=np.int64)


def _top1_accuracy(encoder, head, dataset, indices, batch_size: int = 256):
    if len(indices) == 0:
        return None
    dtype = next(encoder.parameters()).dtype
    correct = 0
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            idx = indices[start : start + batch_size]
            x = images_to_tensor(dataset.pixels[idx], dtype)
            pred = head(encoder(x)).argmax(dim=-1).numpy()
            correct += int((pred == dataset.class_ids[idx]).sum())
    return correct / len(indices)


def pretrain_encoder(
    dataset: LabeledImageSet,
    encoder: Encoder,
    config: PretrainConfig,
    metrics_path=None,
):
    """Supervised pretraining; returns (encoder, per-epoch metrics history).

    A temporary linear head over the dataset's classes is attached for the
    classification loss and discarded afterwards. One metrics record per
    epoch: {epoch, loss_class, loss_triplet, loss_total, val_top1, lr}.
    """
    if dataset.n_classes < 2:
        raise ValidationError("pretraining needs at least 2 classes")

    dtype = next(encoder.parameters()).dtype
    d = encoder.config.embed_dim
    head = nn.Linear(d, dataset.n_classes).to(dtype)
    gen = torch_generator(config.seed, "pretrain-head")
    with torch.no_grad():
        bound = 1.0 / math.sqrt(d)
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.zero_()

    optimizer = torch.optim.AdamW(
        list(encoder.parameters()) + list(head.parameters()),
        lr=config.learning_rate,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )

    train_idx, val_idx = _train_val_split(dataset, config.val_fraction, config.seed)
    by_class = {c: train_idx[dataset.class_ids[train_idx] == c] for c in range(dataset.n_classes)}
    eligible = [c for c, pool in by_class.items() if len(pool) > 0]
    p = min(config.classes_per_batch, len(eligible))
    k = config.samples_per_class
    steps_per_epoch = max(1, len(train_idx) // (p * k))

    history = []
    metrics_file = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            encoder.train()
            sums = {"loss_class": 0.0, "loss_triplet": 0.0, "loss_total": 0.0}
            for step in range(steps_per_epoch):
                rng = make_rng(config.seed, "pretrain", epoch, step)
                chosen = rng.choice(len(eligible), size=p, replace=False)
                batch_idx = []
                for ci in chosen:
                    pool = by_class[eligible[int(ci)]]
                    batch_idx.extend(rng.choice(pool, size=k, replace=len(pool) < k))
                batch_idx = np.array(batch_idx, dtype=np.int64)
                images = dataset.pixels[batch_idx]
                if config.augment is not None:
                    aug_seed = derive_seed(config.seed, "pretrain-aug", epoch, step)
                    images = np.stack(
                        [
                            preprocess(images[i], config.augment, "train", make_rng(aug_seed, i))
                            for i in range(images.shape[0])
                        ]
                    )
                x = images_to_tensor(images, dtype)
                targets = torch.from_numpy(dataset.class_ids[batch_idx])

                embeddings = encoder(x)
                logits = head(embeddings)
                loss_class = cross_entropy_smoothed(logits, targets, config.label_smoothing)
                if config.triplet is not None:
                    loss_trip = triplet_loss_from_batch(embeddings, dataset.class_ids[batch_idx], config.triplet)
                    loss = combined_loss(loss_class, loss_trip, config.triplet.weight)
                else:
                    loss_trip = torch.zeros(())
                    loss = loss_class

                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                sums["loss_class"] += loss_class.detach().item()
                sums["loss_triplet"] += loss_trip.detach().item()
                sums["loss_total"] += loss.detach().item()

            record = {
                "epoch": epoch,
                "loss_class": sums["loss_class"] / steps_per_epoch,
                "loss_triplet": sums["loss_triplet"] / steps_per_epoch,
                "loss_total": sums["loss_total"] / steps_per_epoch,
                "val_top1": _top1_accuracy(encoder, head, dataset, val_idx),
                "lr": config.learning_rate,
            }
            history.append(record)
            if metrics_file:
                json.dump(record, metrics_file)
                metrics_file.write("\n")
    finally:
        if metrics_file:
            metrics_file.close()

    encoder.eval()
    return encoder, history
