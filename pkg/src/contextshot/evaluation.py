"""The n-way k-shot evaluation protocol.

Accuracy is the mean over independently sampled tasks; the reported
uncertainty is the binomial standard error sqrt(p*(1-p)/N). Task seeds are
derived from (base seed, task index), so results are identical regardless
of how tasks are scheduled across worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch

from . import configio
from .datasets import LabeledImageSet
from .encoders import Encoder, encode
from .episodes import Episode, sample_episode
from .errors import ValidationError
from .icl import IclModel, predict
from .seeding import derive_seed, make_rng


@dataclass(frozen=True)
class AccuracyReport:
    dataset_id: str
    n: int
    k: int
    tasks: int
    mean_acc: float
    std_err: float
    seed: int
    model_id: str
    predictor: str = "icl"
    per_task_outcomes: tuple[int, ...] | None = None

    def formatted(self) -> str:
        return format_mean_se(self.mean_acc, self.std_err)

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset_id,
            "n": self.n,
            "k": self.k,
            "tasks": self.tasks,
            "mean_acc": self.mean_acc,
            "std_err": self.std_err,
            "seed": self.seed,
            "model_id": self.model_id,
            "predictor": self.predictor,
        }


@dataclass(frozen=True)
class SweepTable:
    """Accuracy-vs-context-length table: one (k, mean, std_err) row per k."""

    n: int
    tasks: int
    seed: int
    rows: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        ks = [r[0] for r in self.rows]
        if ks != sorted(set(ks)):
            raise ValidationError("sweep rows must have strictly increasing k values")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("k,mean_acc,std_err\n")
            for k, mean, se in self.rows:
                fh.write(f"{k},{mean!r},{se!r}\n")

    def to_svg(self, path) -> None:
        write_sweep_svg(self, path)


def mean_and_se(outcomes) -> tuple[float, float]:
    """Mean and binomial standard error of a 0/1 outcome vector."""
    arr = np.asarray(outcomes, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("outcomes must be non-empty")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValidationError("outcomes must be 0/1 valued")
    mean = float(arr.mean())
    se = float(np.sqrt(mean * (1.0 - mean) / arr.size))
    return mean, se


def format_mean_se(mean: float, se: float) -> str:
    """Percentages to one decimal, rounded half-up: '20.8 ± 0.6'."""

    def pct(x: float) -> str:
        return str(Decimal(repr(x * 100.0)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))

    return f"{pct(mean)} ± {pct(se)}"


def knn_predict(support_embeddings, support_slots, query_embedding, k_neighbors: int = 5) -> int:
    """Majority slot among the k nearest supports (Euclidean distance).

    Distance ties break toward the lower support index; majority ties break
    toward the tied slot that contains the single closest neighbor.
    """
    emb = np.asarray(support_embeddings, dtype=np.float64)
    slots = np.asarray(support_slots)
    query = np.asarray(query_embedding, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != slots.shape[0]:
        raise ValidationError("support embeddings and slots must align")
    m = emb.shape[0]
    if m < k_neighbors:
        raise ValidationError(f"need at least {k_neighbors} supports, got {m}")

    dist = np.sqrt(((emb - query[None, :]) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(m), dist))  # distance, then index
    nearest = order[:k_neighbors]
    counts: dict[int, int] = {}
    for i in nearest:
        counts[int(slots[i])] = counts.get(int(slots[i]), 0) + 1
    top = max(counts.values())
    tied = {slot for slot, c in counts.items() if c == top}
    for i in nearest:  # nearest-first: the first member of a tied slot wins
        if int(slots[i]) in tied:
            return int(slots[i])
    raise AssertionError("unreachable")


class IclPredictor:
    """Episode -> slot via the in-context model.

    With an `embedding_table` aligned to the evaluation dataset's items, the
    encoder forward is skipped and embeddings are looked up by item index.
    """

    name = "icl"

    def __init__(self, model: IclModel, encoder: Encoder, embedding_table: np.ndarray | None = None):
        self.model = model
        self.encoder = encoder
        self.embedding_table = embedding_table
        model.eval()
        encoder.eval()

    def __call__(self, episode: Episode) -> int:
        dtype = next(self.model.parameters()).dtype
        if self.embedding_table is not None:
            sup = torch.as_tensor(self.embedding_table[episode.support_indices], dtype=dtype)[None]
            q = torch.as_tensor(self.embedding_table[episode.query_index], dtype=dtype)[None]
        else:
            flat = np.concatenate([episode.support_pixels, episode.query_pixels[None]], axis=0)
            emb = torch.from_numpy(encode(self.encoder, flat)).to(dtype)
            sup, q = emb[: episode.m][None], emb[episode.m :]
        with torch.no_grad():
            logits = self.model(sup, torch.from_numpy(episode.support_slots)[None], q)[0]
        return predict(logits, episode.slot_of.values())


class KnnPredictor:
    """Episode -> slot via k-nearest-neighbour voting in embedding space."""

    name = "knn"

    def __init__(self, encoder: Encoder, k_neighbors: int = 5, embedding_table: np.ndarray | None = None):
        self.encoder = encoder
        self.k_neighbors = k_neighbors
        self.embedding_table = embedding_table
        encoder.eval()

    def __call__(self, episode: Episode) -> int:
        if self.embedding_table is not None:
            sup = self.embedding_table[episode.support_indices]
            q = self.embedding_table[episode.query_index]
        else:
            flat = np.concatenate([episode.support_pixels, episode.query_pixels[None]], axis=0)
            emb = encode(self.encoder, flat)
            sup, q = emb[: episode.m], emb[episode.m]
        return knn_predict(sup, episode.support_slots, q, self.k_neighbors)


def precompute_embeddings(encoder: Encoder, dataset: LabeledImageSet) -> np.ndarray:
    """Embed every dataset item once, for index-based predictor lookup."""
    return encode(encoder, dataset.pixels)


def evaluate(
    predictor,
    dataset: LabeledImageSet,
    n: int,
    k: int,
    tasks: int,
    n_max: int = 10,
    seed: int = 0,
    dataset_id: str = "dataset",
    model_id: str = "model",
    threads: int = 1,
    keep_outcomes: bool = False,
) -> AccuracyReport:
    """Mean accuracy with standard error over `tasks` sampled episodes.

    Each task t uses an rng derived from (seed, t); outcome t is 1 iff the
    predictor returns the query's slot. Results are byte-identical for a
    given seed regardless of `threads`.
    """
    if tasks < 1:
        raise ValidationError("tasks must be >= 1")
    outcomes = np.zeros(tasks, dtype=np.int64)

    def run_task(t: int) -> None:
        rng = make_rng(seed, "task", t)
        episode = sample_episode(dataset, n, k, n_max, rng)
        outcomes[t] = 1 if predictor(episode) == episode.query_slot else 0

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_task, range(tasks)))
    else:
        for t in range(tasks):
            run_task(t)

    mean, se = mean_and_se(outcomes)
    return AccuracyReport(
        dataset_id=dataset_id,
        n=n,
        k=k,
        tasks=tasks,
        mean_acc=mean,
        std_err=se,
        seed=seed,
        model_id=model_id,
        predictor=getattr(predictor, "name", "custom"),
        per_task_outcomes=tuple(int(x) for x in outcomes) if keep_outcomes else None,
    )


def context_sweep(
    predictor,
    dataset: LabeledImageSet,
    n: int,
    k_values,
    tasks: int,
    n_max: int = 10,
    seed: int = 0,
    dataset_id: str = "dataset",
    model_id: str = "model",
    threads: int = 1,
) -> SweepTable:
    """One evaluate() per k (with a k-derived seed), emitted in k order."""
    k_values = [int(k) for k in k_values]
    if not k_values or k_values != sorted(set(k_values)):
        raise ValidationError("k_values must be non-empty and strictly increasing")
    rows = []
    for k in k_values:
        report = evaluate(
            predictor, dataset, n, k, tasks, n_max,
            seed=derive_seed(seed, "sweep-k", k),
            dataset_id=dataset_id, model_id=model_id, threads=threads,
        )
        rows.append((k, report.mean_acc, report.std_err))
    return SweepTable(n=n, tasks=tasks, seed=seed, rows=tuple(rows))


def write_report_json(report: AccuracyReport, path, created_at: str | None = None) -> None:
    """Write a report as JSON with stable key order.

    `created_at` is omitted by default so identical runs produce identical
    bytes; pass a timestamp string to include one.
    """
    payload = report.to_json_dict()
    if created_at is not None:
        payload["created_at"] = created_at
    configio.write_json(path, payload)


def write_sweep_svg(table: SweepTable, path, width: int = 480, height: int = 320) -> None:
    """A minimal accuracy-vs-k line plot; deterministic bytes, no dependencies."""
    pad = 48
    ks = [r[0] for r in table.rows]
    lo_k, hi_k = min(ks), max(ks)
    span_k = max(hi_k - lo_k, 1)

    def x(k):
        return pad + (k - lo_k) / span_k * (width - 2 * pad)

    def y(acc):
        return height - pad - acc * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yy = y(frac)
        parts.append(f'<line x1="{pad - 4}" y1="{yy:.1f}" x2="{pad}" y2="{yy:.1f}" stroke="black"/>')
        parts.append(f'<text x="{pad - 8}" y="{yy + 4:.1f}" font-size="10" text-anchor="end">{frac:.2f}</text>')
    for k in ks:
        parts.append(
            f'<text x="{x(k):.1f}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{k}</text>'
        )
    points = " ".join(f"{x(k):.2f},{y(acc):.2f}" for k, acc, _ in table.rows)
    parts.append(f'<polyline points="{points}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for k, acc, se in table.rows:
        parts.append(f'<circle cx="{x(k):.2f}" cy="{y(acc):.2f}" r="3" fill="#1f77b4"/>')
        parts.append(
            f'<line x1="{x(k):.2f}" y1="{y(min(1.0, acc + se)):.2f}" '
            f'x2="{x(k):.2f}" y2="{y(max(0.0, acc - se)):.2f}" stroke="#1f77b4"/>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="11" text-anchor="middle">'
        f"shots per class (k), {table.n}-way, {table.tasks} tasks</text>"
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
