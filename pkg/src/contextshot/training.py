"""Episodic training of the in-context model.

Covers the piecewise learning-rate schedule (linear warmup, plateau,
geometric decay to lr_min), the encoder regimes (frozen / delayed / joint,
each with a constant or scheduled encoder LR), gradient accumulation, and
checkpointing. When the encoder is frozen for an epoch and no augmentation
is active, support/query embeddings are served from a precomputed table
instead of re-running the encoder.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import configio
from .checkpoints import save_checkpoint
from .datasets import AugmentParams, LabeledImageSet, preprocess
from .encoders import Encoder, encode, images_to_tensor
from .episodes import batch_episodes, sample_episode
from .errors import TrainingDiverged, ValidationError
from .icl import IclModel, predict
from .pretraining import cross_entropy_smoothed
from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

ENCODER_MODES = ("frozen", "delayed", "joint")
LR_MODES = ("constant", "scheduled")


@dataclass(frozen=True)
class ScheduleParams:
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    warmup_epochs: int = 50
    plateau_epochs: int = 10
    decay_epochs: int = 540

    def __post_init__(self):
        if self.lr_max <= 0 or self.lr_min <= 0:
            raise ValidationError("learning rates must be positive")
        if self.lr_min > self.lr_max:
            raise ValidationError("lr_min must not exceed lr_max")
        if self.warmup_epochs < 0 or self.plateau_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.decay_epochs < 1:
            raise ValidationError("decay_epochs must be >= 1")


@dataclass(frozen=True)
class RegimeConfig:
    encoder_pretrained: bool = True
    encoder_mode: str = "frozen"  # frozen | delayed | joint
    unfreeze_epoch: int = 0       # delayed only; encoder updates start at unfreeze_epoch + 1
    encoder_lr_mode: str = "constant"
    body_lr_mode: str = "scheduled"
    encoder_constant_lr: float = 1e-5

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ValidationError(f"encoder_mode must be one of {ENCODER_MODES}")
        if self.encoder_lr_mode not in LR_MODES or self.body_lr_mode not in LR_MODES:
            raise ValidationError(f"LR modes must be one of {LR_MODES}")
        if self.encoder_mode == "delayed" and self.unfreeze_epoch < 1:
            raise ValidationError("delayed mode requires unfreeze_epoch >= 1")
        if self.encoder_constant_lr <= 0:
            raise ValidationError("encoder_constant_lr must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    samples_per_epoch: int = 10000
    batch_size: int = 16
    n: int = 10
    k: int = 5
    n_max: int = 10
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    label_smoothing: float = 0.1
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    seed: int = 0
    accumulation_steps: int = 1
    augment: AugmentParams | None = None
    val_episodes: int = 200
    val_every: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.samples_per_epoch < 1 or self.batch_size < 1:
            raise ValidationError("epochs, samples_per_epoch and batch_size must be >= 1")
        if self.accumulation_steps < 1:
            raise ValidationError("accumulation_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must lie in [0, 1)")
        if self.samples_per_epoch < self.batch_size * self.accumulation_steps:
            raise ValidationError("samples_per_epoch smaller than one optimizer step's worth of episodes")


def train_config_hash(config: TrainConfig) -> str:
    return hashlib.sha256(configio.dumps(config).encode("utf-8")).hexdigest()


def scheduled_lr(epoch: int, p: ScheduleParams) -> float:
    """Piecewise LR: linear warmup to lr_max, plateau, geometric decay to lr_min.

    During warmup (epoch <= warmup_epochs) the LR is (epoch/warmup)*lr_max;
    through the plateau it stays at lr_max; afterwards it decays as
    lr_max * (lr_min/lr_max)^t with t the fraction of decay_epochs elapsed,
    reaching exactly lr_min at t >= 1.
    """
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    if p.warmup_epochs > 0 and epoch <= p.warmup_epochs:
        return (epoch / p.warmup_epochs) * p.lr_max
    if epoch <= p.warmup_epochs + p.plateau_epochs:
        return p.lr_max
    t = (epoch - p.warmup_epochs - p.plateau_epochs) / p.decay_epochs
    if t >= 1.0:
        return p.lr_min
    return p.lr_max * (p.lr_min / p.lr_max) ** t


def regime_lrs(regime: RegimeConfig, schedule: ScheduleParams, epoch: int):
    """(body_lr, encoder_lr, encoder_trainable) for a 1-based epoch."""
    if regime.body_lr_mode == "scheduled":
        body_lr = scheduled_lr(epoch, schedule)
    else:
        body_lr = schedule.lr_min

    if regime.encoder_mode == "frozen":
        return body_lr, 0.0, False
    if regime.encoder_mode == "delayed" and epoch <= regime.unfreeze_epoch:
        return body_lr, 0.0, False
    if regime.encoder_lr_mode == "constant":
        return body_lr, regime.encoder_constant_lr, True
    return body_lr, scheduled_lr(epoch, schedule), True


_KIND_CODES = {
    "residual_cnn": "res",
    "res": "res",
    "vit": "vit",
    "vittrip": "vittrip",
    "vit_triplet": "vittrip",
}


def format_regime(encoder_kind: str, pretrained: bool, regime: RegimeConfig) -> str:
    """Code string `<A>-<pre|non>[<B>,<C>,<D>]` naming a training variation.

    A is the encoder family; B/C are the body/encoder LR modes ('s'
    scheduled, 'c' constant, '-' when the encoder is frozen); D marks when
    encoder updates start ('0' from the start, 't' delayed, '-' never).
    """
    kind = _KIND_CODES.get(encoder_kind)
    if kind is None:
        raise ValidationError(f"unknown encoder kind {encoder_kind!r}")
    body = regime.body_lr_mode[0]
    if regime.encoder_mode == "frozen":
        enc, when = "-", "-"
    elif regime.encoder_mode == "delayed":
        enc, when = regime.encoder_lr_mode[0], "t"
    else:
        enc, when = regime.encoder_lr_mode[0], "0"
    return f"{kind}-{'pre' if pretrained else 'non'}[{body},{enc},{when}]"


class _EmbeddingCache:
    """Per-dataset embedding tables, valid only while the encoder is unchanged."""

    def __init__(self, encoder: Encoder, dtype: torch.dtype):
        self.encoder = encoder
        self.dtype = dtype
        self.tables: dict[int, torch.Tensor] = {}

    def table(self, dataset: LabeledImageSet) -> torch.Tensor:
        key = id(dataset)
        if key not in self.tables:
            emb = encode(self.encoder, dataset.pixels)
            self.tables[key] = torch.from_numpy(emb).to(self.dtype)
        return self.tables[key]

    def invalidate(self):
        self.tables.clear()


def _episode_tensors(episodes, dataset, encoder, model, cache, augment, aug_seed):
    """(support_emb, support_slots, query_emb, query_slots) for a list of episodes."""
    dtype = next(model.parameters()).dtype
    slots = torch.from_numpy(np.stack([ep.support_slots for ep in episodes]))
    query_slots = torch.from_numpy(np.array([ep.query_slot for ep in episodes], dtype=np.int64))

    if cache is not None:
        table = cache.table(dataset)
        sup_idx = torch.from_numpy(np.stack([ep.support_indices for ep in episodes]))
        q_idx = torch.from_numpy(np.array([ep.query_index for ep in episodes], dtype=np.int64))
        return table[sup_idx], slots, table[q_idx], query_slots

    b = len(episodes)
    m = episodes[0].m
    supports = np.stack([ep.support_pixels for ep in episodes])
    queries = np.stack([ep.query_pixels for ep in episodes])
    flat = np.concatenate([supports.reshape(b * m, *supports.shape[2:]), queries], axis=0)
    if augment is not None:
        flat = np.stack(
            [preprocess(flat[i], augment, "train", make_rng(aug_seed, i)) for i in range(flat.shape[0])]
        )
    emb = encoder(images_to_tensor(flat, dtype))
    return emb[: b * m].reshape(b, m, -1), slots, emb[b * m :], query_slots


def _validate(model, encoder, val_set, config, epoch, cache):
    """n-way k-shot accuracy over `config.val_episodes` held-out episodes."""
    model.eval()
    correct = 0
    with torch.no_grad():
        if cache is None:
            val_table = torch.from_numpy(encode(encoder, val_set.pixels)).to(next(model.parameters()).dtype)
        else:
            val_table = cache.table(val_set)
        for i in range(config.val_episodes):
            rng = make_rng(config.seed, "val", epoch, i)
            ep = sample_episode(val_set, config.n, config.k, config.n_max, rng)
            sup = val_table[torch.from_numpy(ep.support_indices)][None]
            q = val_table[ep.query_index][None]
            logits = model(sup, torch.from_numpy(ep.support_slots)[None], q)[0]
            if predict(logits, ep.slot_of.values()) == ep.query_slot:
                correct += 1
    model.train()
    return correct / config.val_episodes


def train_icl(
    model: IclModel,
    encoder: Encoder,
    train_set: LabeledImageSet,
    config: TrainConfig,
    val_set: LabeledImageSet | None = None,
    out_dir=None,
    metrics_path=None,
):
    """Train the in-context model; returns (checkpoint paths, metrics history).

    Per epoch: sample `samples_per_epoch` episodes, batch them, minimize
    label-smoothed cross-entropy of the query logits against the query slot,
    step with per-regime learning rates. Validation runs every `val_every`
    epochs and on the final epoch when `val_set` is given. Checkpoints are
    written at best-validation and at the last epoch when `out_dir` is given.
    With a frozen regime the encoder's parameters are bit-identical before
    and after training.
    """
    if train_set.n_classes < config.n:
        raise ValidationError(f"training set has {train_set.n_classes} classes, episodes need {config.n}")
    if val_set is not None and val_set.n_classes < config.n:
        raise ValidationError(f"validation set has {val_set.n_classes} classes, episodes need {config.n}")
    if encoder.config.embed_dim != model.config.embed_dim:
        raise ValidationError("encoder and model embedding dimensions differ")
    dtype = next(model.parameters()).dtype
    encoder.to(dtype)

    body_group = {"params": list(model.parameters()), "lr": config.schedule.lr_min}
    groups = [body_group]
    encoder_in_optimizer = config.regime.encoder_mode != "frozen"
    if encoder_in_optimizer:
        groups.append({"params": list(encoder.parameters()), "lr": 0.0})
    optimizer = torch.optim.AdamW(groups, betas=config.betas, weight_decay=config.weight_decay)

    steps_per_epoch = config.samples_per_epoch // (config.batch_size * config.accumulation_steps)
    cache = _EmbeddingCache(encoder, dtype)
    history = []
    best_val, best_path, last_path = None, None, None
    out_dir = Path(out_dir) if out_dir is not None else None
    regime_code = format_regime(encoder.config.kind, config.regime.encoder_pretrained, config.regime)
    cfg_hash = train_config_hash(config)

    metrics_file = open(metrics_path, "w", encoding="utf-8", newline="\n") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            body_lr, encoder_lr, encoder_trainable = regime_lrs(config.regime, config.schedule, epoch)
            optimizer.param_groups[0]["lr"] = body_lr
            if encoder_in_optimizer:
                optimizer.param_groups[1]["lr"] = encoder_lr if encoder_trainable else 0.0
            for p in encoder.parameters():
                p.requires_grad_(encoder_trainable)
            use_cache = not encoder_trainable and config.augment is None

            torch.manual_seed(derive_seed(config.seed, "torch", epoch))
            model.train()
            encoder.train(encoder_trainable)

            epoch_loss = 0.0
            episode_index = 0
            for step in range(steps_per_epoch):
                optimizer.zero_grad()
                step_loss = 0.0
                for micro in range(config.accumulation_steps):
                    episodes = []
                    for _ in range(config.batch_size):
                        rng = make_rng(config.seed, "episode", epoch, episode_index)
                        episodes.append(sample_episode(train_set, config.n, config.k, config.n_max, rng))
                        episode_index += 1
                    batch = batch_episodes(episodes)
                    aug_seed = derive_seed(config.seed, "train-aug", epoch, step, micro)
                    sup, slots, q, q_slots = _episode_tensors(
                        batch.episodes, train_set, encoder, model,
                        cache if use_cache else None, config.augment, aug_seed,
                    )
                    logits = model(sup, slots, q)
                    loss = cross_entropy_smoothed(logits, q_slots, config.label_smoothing)
                    loss = loss / config.accumulation_steps
                    if not torch.isfinite(loss):
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}, step {step} "
                            f"(seed {config.seed}, episode index {episode_index})"
                        )
                    loss.backward()
                    step_loss += loss.detach().item()
                optimizer.step()
                if encoder_trainable:
                    cache.invalidate()
                epoch_loss += step_loss

            val_acc = None
            if val_set is not None and (epoch % config.val_every == 0 or epoch == config.epochs):
                val_acc = _validate(model, encoder, val_set, config, epoch, cache if use_cache else None)

            record = {
                "epoch": epoch,
                "lr_body": body_lr,
                "lr_encoder": encoder_lr if encoder_trainable else 0.0,
                "encoder_trainable": encoder_trainable,
                "train_loss": epoch_loss / steps_per_epoch,
                "val_acc": val_acc,
            }
            history.append(record)
            if metrics_file:
                json.dump(record, metrics_file)
                metrics_file.write("\n")
            log.info(
                "epoch %d/%d loss %.4f val %s", epoch, config.epochs, record["train_loss"],
                "-" if val_acc is None else f"{val_acc:.3f}",
            )

            if out_dir is not None:
                meta = {"regime": regime_code, "train_config_hash": cfg_hash, "epoch": epoch, "val_acc": val_acc}
                if val_acc is not None and (best_val is None or val_acc >= best_val):
                    best_val = val_acc
                    best_path = save_checkpoint(model, encoder, meta, out_dir / "best.ckpt")
                if epoch == config.epochs:
                    last_path = save_checkpoint(model, encoder, meta, out_dir / "last.ckpt")
    finally:
        if metrics_file:
            metrics_file.close()

    model.eval()
    encoder.eval()
    return {"best": best_path, "last": last_path}, history
