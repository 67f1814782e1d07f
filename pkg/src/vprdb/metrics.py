"""Database statistics and retrieval evaluation against spatial ground truth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, InputError, InternalConsistencyError
from .overlap import FrameVoxelSets, InvertedVoxelIndex, PairOverlapTable, coverage_overlap
from .selection import DatabaseSelection

__all__ = [
    "DatabaseStats",
    "DescriptorSet",
    "RetrievalResult",
    "compute_stats",
    "reduction_rate",
    "format_reduction",
    "ground_truth_match",
    "recall_at_k",
    "export_finetune_split",
    "load_descriptors",
    "save_descriptors",
    "write_stats_json",
    "GT_THRESHOLD",
    "VALIDATION_PERIOD",
]

GT_THRESHOLD = 0.3
VALIDATION_PERIOD = 5


def reduction_rate(sequence_size: int, db_size: int) -> float:
    return sequence_size / db_size


def format_reduction(rate: float) -> str:
    """Render a reduction rate as ``x<nearest integer>`` (halves round up)."""
    return f"x{math.floor(rate + 0.5)}"


@dataclass(frozen=True)
class DatabaseStats:
    sequence_size: int
    db_size: int
    reduction_rate: float
    spatial_coverage: float
    excluded_frames: int = 0
    threshold: Optional[float] = None

    def __post_init__(self):
        if not 1 <= self.db_size <= self.sequence_size:
            raise InternalConsistencyError(
                f"database size {self.db_size} outside [1, {self.sequence_size}]"
            )

    @property
    def reduction_label(self) -> str:
        return format_reduction(self.reduction_rate)

    def summary(self) -> str:
        """One line in the layout of the usual size / rate / coverage table."""
        mu = f"mu={self.threshold:g} " if self.threshold is not None else ""
        return (
            f"{mu}sequence {self.sequence_size}: database {self.db_size}, "
            f"{self.reduction_label}, coverage {self.spatial_coverage:.0f}%"
        )

    def to_json_dict(self, queries_without_gt: Optional[int] = None) -> dict:
        return {
            "sequence_size": self.sequence_size,
            "db_size": self.db_size,
            "reduction_rate": self.reduction_rate,
            "spatial_coverage_percent": self.spatial_coverage,
            "excluded_frames": self.excluded_frames,
            "queries_without_gt": queries_without_gt,
        }


def compute_stats(
    selection: DatabaseSelection, sets: FrameVoxelSets, index: InvertedVoxelIndex
) -> DatabaseStats:
    """Sequence/database sizes, reduction rate and spatial coverage.

    Spatial coverage is the percentage of map voxels that at least one
    database frame observes.
    """
    db = np.asarray(selection.db_ids, dtype=np.int64)
    if len(db) and (db.min() < 0 or db.max() >= sets.n_frames or not sets.eligible[db].all()):
        raise InternalConsistencyError("selection refers to frames without voxels")
    in_db = np.isin(index.frames, db)
    covered = np.add.reduceat(in_db.astype(np.int64), index.indptr[:-1]) > 0
    coverage = 100.0 * int(covered.sum()) / index.n_voxels
    return DatabaseStats(
        sequence_size=sets.n_frames,
        db_size=len(db),
        reduction_rate=reduction_rate(sets.n_frames, len(db)),
        spatial_coverage=coverage,
        excluded_frames=len(sets.excluded_ids),
        threshold=selection.threshold,
    )


def ground_truth_match(
    query_id: int, db_id: int, table: PairOverlapTable, gt_threshold: float = GT_THRESHOLD
) -> bool:
    """Whether the database frame covers more than ``gt_threshold`` of the query's voxels."""
    common = table.intersection(query_id, db_id)
    return coverage_overlap(common, int(table.sizes[query_id])) > gt_threshold


@dataclass(frozen=True)
class DescriptorSet:
    """Global image descriptors keyed by frame id."""

    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) != len(ids):
            raise InputError(f"descriptor matrix shape {vectors.shape} does not match {len(ids)} ids")
        if len(np.unique(ids)) != len(ids):
            raise InputError("duplicate frame ids in descriptor set")
        if not np.all(np.isfinite(vectors)):
            raise InputError("descriptor set contains non-finite values")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, Iterable[float]]) -> "DescriptorSet":
        ids = sorted(mapping)
        rows = [list(mapping[i]) for i in ids]
        if len({len(r) for r in rows}) > 1:
            raise InputError("descriptors have different dimensions")
        return cls(np.asarray(ids), np.asarray(rows, dtype=np.float64).reshape(len(ids), -1))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, frame_id) -> bool:
        return bool(np.any(self.ids == frame_id))

    def rows(self, frame_ids) -> np.ndarray:
        frame_ids = np.asarray(frame_ids, dtype=np.int64).reshape(-1)
        order = np.argsort(self.ids)
        pos = np.searchsorted(self.ids[order], frame_ids)
        pos = np.minimum(pos, len(order) - 1)
        hit = self.ids[order][pos] == frame_ids if len(order) else np.zeros(len(frame_ids), bool)
        if not np.all(hit):
            missing = frame_ids[~hit][0]
            raise InputError(f"missing descriptor for frame {int(missing)}")
        return self.vectors[order[pos]]

    def unit_rows(self, frame_ids) -> np.ndarray:
        rows = self.rows(frame_ids)
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InputError("zero-length descriptor has no direction")
        return rows / norms


@dataclass(frozen=True)
class RetrievalResult:
    """Per-query rankings and the aggregate recall.

    ``ranked[q]`` lists the top-k database ids for query ``q``;
    ``correct[q]`` and ``similarity[q]`` are aligned with it. Queries with
    no matching database frame at all are listed in
    ``queries_without_gt`` and excluded from ``recall``.
    """

    k: int
    ranked: dict
    similarity: dict
    correct: dict
    recall: float
    evaluated: int
    queries_without_gt: tuple = field(default_factory=tuple)

    def recalled(self, query_id: int) -> bool:
        return any(self.correct[query_id])

    def rows(self):
        for q in sorted(self.ranked):
            for rank, (db, sim, ok) in enumerate(
                zip(self.ranked[q], self.similarity[q], self.correct[q]), start=1
            ):
                yield q, rank, db, sim, ok

    def to_csv(self, path, query_label=None, db_label=None) -> None:
        query_label = query_label or (lambda q: q)
        db_label = db_label or (lambda d: d)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["query_id", "rank", "db_id", "similarity", "correct"])
            for q, rank, db, sim, ok in self.rows():
                writer.writerow([query_label(q), rank, db_label(db), f"{sim:.9f}", int(ok)])


def recall_at_k(
    db_ids: Iterable[int],
    query_ids: Iterable[int],
    descriptors: DescriptorSet,
    k: int,
    table: PairOverlapTable,
    gt_threshold: float = GT_THRESHOLD,
) -> RetrievalResult:
    """Recall@k with cosine-similarity ranking and spatial correctness.

    Database frames are ranked by descending cosine similarity to the
    query (ties to the smaller id). A query is recalled when any of its
    top-k frames covers more than ``gt_threshold`` of the query's voxels.
    """
    if int(k) != k or k < 1:
        raise ConfigError(f"k must be a positive integer, got {k}")
    k = int(k)
    db = np.array(sorted(set(int(d) for d in db_ids)), dtype=np.int64)
    queries = np.array(sorted(set(int(q) for q in query_ids)), dtype=np.int64)
    if len(queries) == 0:
        raise InputError("no queries")
    if len(db) == 0:
        raise InputError("empty database")

    db_vec = descriptors.unit_rows(db)
    q_vec = descriptors.unit_rows(queries)
    sims = q_vec @ db_vec.T

    q_sizes = table.sizes[queries]
    rows = np.repeat(queries, len(db))
    cols = np.tile(db, len(queries))
    common = table.intersections(rows, cols).reshape(len(queries), len(db))
    with np.errstate(divide="ignore", invalid="ignore"):
        cover = np.where(q_sizes[:, None] > 0, common / np.maximum(q_sizes[:, None], 1), 0.0)
    gt = cover > gt_threshold

    # descending similarity, ascending id on ties (db is sorted ascending)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    has_gt = gt.any(axis=1)

    ranked, similarity, correct = {}, {}, {}
    hits = 0
    for n, q in enumerate(queries.tolist()):
        top = order[n]
        ranked[q] = db[top].tolist()
        similarity[q] = sims[n, top].tolist()
        correct[q] = gt[n, top].tolist()
        if has_gt[n] and any(correct[q]):
            hits += 1
    evaluated = int(has_gt.sum())
    recall = hits / evaluated if evaluated else 0.0
    return RetrievalResult(
        k=k,
        ranked=ranked,
        similarity=similarity,
        correct=correct,
        recall=recall,
        evaluated=evaluated,
        queries_without_gt=tuple(queries[~has_gt].tolist()),
    )


def export_finetune_split(class_of: Mapping[int, int], sequence) -> tuple[list[str], list[str]]:
    """Split labelled frames into train and validation manifests.

    Every fifth frame (ids divisible by 5) goes to validation. Lines are
    ``frame_id,class_db_id,color_path``.
    """
    frames = {f.id: f for f in sequence.frames}
    train, val = [], []
    for frame_id in sorted(class_of):
        frame = frames.get(frame_id)
        if frame is None:
            raise InputError(f"class map refers to unknown frame {frame_id}")
        color = "" if frame.color_path is None else str(frame.color_path)
        line = f"{frame_id},{class_of[frame_id]},{color}"
        (val if frame_id % VALIDATION_PERIOD == 0 else train).append(line)
    return train, val


def load_descriptors(path) -> DescriptorSet:
    """Read ``frame_id v_1 ... v_D`` lines; ``#`` starts a comment."""
    ids, rows, seen = [], [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                frame_id = int(parts[0])
                vec = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: cannot parse descriptor line ({exc})") from None
            if not vec:
                raise InputError(f"{path}:{lineno}: descriptor has no values")
            if rows and len(vec) != len(rows[0]):
                raise InputError(
                    f"{path}:{lineno}: descriptor dimension {len(vec)} differs from {len(rows[0])}"
                )
            if not all(math.isfinite(x) for x in vec):
                raise InputError(f"{path}:{lineno}: non-finite descriptor value")
            if frame_id in seen:
                raise InputError(f"{path}:{lineno}: duplicate frame id {frame_id}")
            seen.add(frame_id)
            ids.append(frame_id)
            rows.append(vec)
    if not ids:
        raise InputError(f"{path}: no descriptors")
    return DescriptorSet(np.asarray(ids), np.asarray(rows))


def save_descriptors(path, descriptors: DescriptorSet) -> None:
    with open(path, "w") as fh:
        for frame_id, vec in zip(descriptors.ids.tolist(), descriptors.vectors.tolist()):
            fh.write(" ".join([str(frame_id)] + [repr(float(x)) for x in vec]) + "\n")


def write_stats_json(path, stats: DatabaseStats, queries_without_gt: Optional[int] = None) -> None:
    Path(path).write_text(json.dumps(stats.to_json_dict(queries_without_gt), indent=2, sort_keys=True) + "\n")
