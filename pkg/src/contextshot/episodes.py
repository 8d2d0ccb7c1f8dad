"""n-way k-shot episode sampling and batching.

An episode is one few-shot task: n*k labeled support images plus a single
query drawn from one of the n classes. Each episode's classes are injected
into a random subset of the model's label slots, so slot indices carry no
class semantics across episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledImageSet
from .errors import CapacityError, ValidationError


@dataclass(frozen=True)
class Episode:
    """One few-shot task instance.

    Supports are grouped by class (k consecutive items per class). The query
    image instance never appears among the supports. `slot_of` is an
    injection of the episode's classes into [0, n_max).
    """

    support_pixels: np.ndarray   # (m, H, W, C)
    support_classes: np.ndarray  # (m,) dataset class ids
    support_slots: np.ndarray    # (m,) label slots in [0, n_max)
    query_pixels: np.ndarray     # (H, W, C)
    query_class: int
    query_slot: int
    classes: tuple[int, ...]
    slot_of: dict[int, int]
    n_max: int
    support_indices: np.ndarray  # (m,) dataset item indices
    query_index: int

    def __post_init__(self):
        m = self.support_pixels.shape[0]
        if not (len(self.support_classes) == len(self.support_slots) == len(self.support_indices) == m):
            raise ValidationError("support arrays must have equal length")
        n = len(self.classes)
        if len(set(self.classes)) != n:
            raise ValidationError("episode classes must be distinct")
        if m % n != 0:
            raise ValidationError(f"support count {m} is not a multiple of n={n}")
        slots = set(self.slot_of.values())
        if len(slots) != n or any(not 0 <= s < self.n_max for s in slots):
            raise ValidationError("slot_of must be an injection into [0, n_max)")
        if self.query_class not in self.classes:
            raise ValidationError("query class must be one of the episode classes")
        if self.query_index in set(int(i) for i in self.support_indices):
            raise ValidationError("query instance must not appear among supports")

    @property
    def n(self) -> int:
        return len(self.classes)

    @property
    def k(self) -> int:
        return self.support_pixels.shape[0] // len(self.classes)

    @property
    def m(self) -> int:
        return self.support_pixels.shape[0]

    @property
    def supports(self) -> list[tuple[np.ndarray, int]]:
        return [(self.support_pixels[i], int(self.support_classes[i])) for i in range(self.m)]


@dataclass(frozen=True)
class EpisodeBatch:
    """A homogeneous, order-preserving collection of episodes."""

    episodes: tuple[Episode, ...]

    def __post_init__(self):
        if not self.episodes:
            raise ValidationError("an EpisodeBatch requires at least one episode")
        first = self.episodes[0]
        for ep in self.episodes[1:]:
            if ep.n != first.n or ep.k != first.k:
                raise ValidationError("episodes in a batch must share (n, k)")
            if ep.support_pixels.shape[1:] != first.support_pixels.shape[1:]:
                raise ValidationError("episodes in a batch must share image shape")
            if ep.n_max != first.n_max:
                raise ValidationError("episodes in a batch must share n_max")

    @property
    def batch_size(self) -> int:
        return len(self.episodes)

    @property
    def n(self) -> int:
        return self.episodes[0].n

    @property
    def k(self) -> int:
        return self.episodes[0].k

    @property
    def n_max(self) -> int:
        return self.episodes[0].n_max

    def stacked_support_pixels(self) -> np.ndarray:
        return np.stack([ep.support_pixels for ep in self.episodes])

    def stacked_support_slots(self) -> np.ndarray:
        return np.stack([ep.support_slots for ep in self.episodes])

    def stacked_query_pixels(self) -> np.ndarray:
        return np.stack([ep.query_pixels for ep in self.episodes])

    def stacked_query_slots(self) -> np.ndarray:
        return np.array([ep.query_slot for ep in self.episodes], dtype=np.int64)


def sample_episode(
    dataset: LabeledImageSet,
    n: int,
    k: int,
    n_max: int,
    rng: np.random.Generator,
) -> Episode:
    """Sample one n-way k-shot episode from `dataset` using `rng`.

    Classes and support images are drawn without replacement; the query is
    drawn uniformly from the n classes, excluding the chosen support
    instances; classes are assigned uniformly random distinct label slots.
    """
    if n < 1 or k < 1:
        raise ValidationError(f"n and k must be >= 1, got n={n}, k={k}")
    if n > n_max:
        raise ValidationError(f"n={n} exceeds n_max={n_max}")
    if dataset.n_classes < n:
        raise CapacityError(f"dataset has {dataset.n_classes} classes, need {n}")

    classes = rng.choice(dataset.n_classes, size=n, replace=False)

    support_indices = []
    for c in classes:
        pool = dataset.indices_of_class(int(c))
        if len(pool) < k:
            raise CapacityError(f"class {int(c)} has {len(pool)} images, need k={k}")
        support_indices.append(rng.choice(pool, size=k, replace=False))
    support_indices = np.concatenate(support_indices)

    query_class = int(classes[rng.integers(n)])
    taken = set(int(i) for i in support_indices)
    remaining = [int(i) for i in dataset.indices_of_class(query_class) if int(i) not in taken]
    if not remaining:
        raise CapacityError(
            f"class {query_class} has no image left for the query after drawing k={k} supports"
        )
    query_index = int(remaining[int(rng.integers(len(remaining)))])

    slots = rng.choice(n_max, size=n, replace=False)
    slot_of = {int(c): int(s) for c, s in zip(classes, slots)}

    support_classes = np.repeat(np.asarray(classes, dtype=np.int64), k)
    support_slots = np.array([slot_of[int(c)] for c in support_classes], dtype=np.int64)

    return Episode(
        support_pixels=dataset.pixels[support_indices],
        support_classes=support_classes,
        support_slots=support_slots,
        query_pixels=dataset.pixels[query_index],
        query_class=query_class,
        query_slot=slot_of[query_class],
        classes=tuple(int(c) for c in classes),
        slot_of=slot_of,
        n_max=n_max,
        support_indices=support_indices.astype(np.int64),
        query_index=query_index,
    )


def batch_episodes(episodes) -> EpisodeBatch:
    """Aggregate episodes into a batch, preserving order."""
    return EpisodeBatch(episodes=tuple(episodes))


def one_hot(slot: int, n_max: int) -> np.ndarray:
    """One-hot vector of length n_max with a 1 at `slot`."""
    if not 0 <= slot < n_max:
        raise ValidationError(f"slot {slot} out of range [0, {n_max})")
    vec = np.zeros(n_max, dtype=np.float32)
    vec[slot] = 1.0
    return vec
