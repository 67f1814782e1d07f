"""Pairwise voxel-set overlap between frames.

Pair intersections are counted through a voxel -> frames inverted index:
every voxel contributes one to each pair of frames that observe it, so
only pairs with a non-empty intersection are ever touched. The work is
proportional to ``sum_v C(k_v, 2)`` where ``k_v`` is the number of frames
seeing voxel ``v``.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateFrameError, InternalConsistencyError, PipelineError

log = logging.getLogger(__name__)

__all__ = [
    "FrameVoxelSets",
    "InvertedVoxelIndex",
    "PairOverlapTable",
    "build_inverted_index",
    "count_pair_intersections",
    "naive_pairwise",
    "coverage_overlap",
    "iou_overlap",
    "pack_keys",
    "HUB_VOXEL_WARNING",
    "NAIVE_FRAME_LIMIT",
]

HUB_VOXEL_WARNING = 2048
NAIVE_FRAME_LIMIT = 500
_SHARD_PAIRS = 4_000_000


def _as_key_array(keys) -> np.ndarray:
    arr = np.asarray(keys, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    arr = arr.reshape(-1, 3)
    return np.unique(arr, axis=0)


@dataclass(frozen=True)
class FrameVoxelSets:
    """Per-frame voxel sets indexed by frame id ``0..n_frames-1``.

    Each entry is an ``(k, 3)`` int64 array of unique voxel keys in
    lexicographic row order. Frames with an empty set are not eligible.
    """

    sets: tuple

    def __post_init__(self):
        cleaned = []
        for keys in self.sets:
            arr = _as_key_array(keys)
            arr.setflags(write=False)
            cleaned.append(arr)
        object.__setattr__(self, "sets", tuple(cleaned))

    @classmethod
    def from_iterables(cls, sets: Iterable[Iterable[Sequence[int]]]) -> "FrameVoxelSets":
        return cls(tuple(np.asarray(list(s), dtype=np.int64) for s in sets))

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, frame_id: int) -> np.ndarray:
        return self.sets[frame_id]

    @property
    def n_frames(self) -> int:
        return len(self.sets)

    @cached_property
    def sizes(self) -> np.ndarray:
        sizes = np.array([len(s) for s in self.sets], dtype=np.int64)
        sizes.setflags(write=False)
        return sizes

    @property
    def eligible(self) -> np.ndarray:
        return self.sizes > 0

    @property
    def eligible_ids(self) -> np.ndarray:
        return np.flatnonzero(self.eligible)

    @property
    def excluded_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.eligible)

    def as_tuple_sets(self) -> list[frozenset]:
        return [frozenset(map(tuple, s.tolist())) for s in self.sets]


def pack_keys(keys: np.ndarray, origin: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Linearize ``(k, 3)`` voxel keys inside the box ``origin + [0, span)``."""
    rel = keys - origin
    return (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]


@dataclass(frozen=True)
class InvertedVoxelIndex:
    """Voxel -> observing frames, stored in CSR form.

    ``frames[indptr[m]:indptr[m + 1]]`` are the sorted ids of frames that
    observe ``voxels[m]``.
    """

    voxels: np.ndarray
    indptr: np.ndarray
    frames: np.ndarray
    n_frames: int

    @property
    def n_voxels(self) -> int:
        return len(self.voxels)

    M = n_voxels

    @property
    def multiplicity(self) -> np.ndarray:
        """Number of frames observing each voxel."""
        return np.diff(self.indptr)

    def frames_of(self, voxel) -> np.ndarray:
        m = self._lookup(np.asarray(voxel, dtype=np.int64).reshape(1, 3))[0]
        if m < 0:
            return np.empty(0, dtype=np.int64)
        return self.frames[self.indptr[m] : self.indptr[m + 1]]

    def as_dict(self) -> dict[tuple[int, int, int], list[int]]:
        return {
            tuple(key): self.frames[self.indptr[m] : self.indptr[m + 1]].tolist()
            for m, key in enumerate(self.voxels.tolist())
        }

    def _lookup(self, keys: np.ndarray) -> np.ndarray:
        # voxels are lexicographically sorted rows
        out = np.full(len(keys), -1, dtype=np.int64)
        for n, key in enumerate(keys):
            lo, hi = 0, len(self.voxels)
            for axis in range(3):
                col = self.voxels[lo:hi, axis]
                a = np.searchsorted(col, key[axis], side="left")
                b = np.searchsorted(col, key[axis], side="right")
                lo, hi = lo + a, lo + b
                if lo >= hi:
                    break
            if lo < hi:
                out[n] = lo
        return out


def build_inverted_index(sets: FrameVoxelSets) -> InvertedVoxelIndex:
    """Associate every observed voxel with the frames that cover it."""
    eligible = sets.eligible_ids
    if len(eligible) == 0:
        raise PipelineError("no frame observes any voxel; nothing to index")
    keys = np.concatenate([sets[i] for i in eligible])
    owners = np.repeat(eligible, sets.sizes[eligible])

    origin = keys.min(axis=0)
    span = keys.max(axis=0) - origin + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2.0**62:
        codes = pack_keys(keys, origin, span)
        uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        voxels = keys[first]
    else:
        voxels, inverse = np.unique(keys, axis=0, return_inverse=True)
        uniq = voxels
    inverse = inverse.reshape(-1)
    order = np.lexsort((owners, inverse))
    counts = np.bincount(inverse, minlength=len(uniq))
    indptr = np.zeros(len(uniq) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    frames = owners[order].astype(np.int64)
    voxels = np.ascontiguousarray(voxels, dtype=np.int64)
    for arr in (voxels, indptr, frames):
        arr.setflags(write=False)
    return InvertedVoxelIndex(voxels=voxels, indptr=indptr, frames=frames, n_frames=sets.n_frames)


@dataclass(frozen=True)
class PairOverlapTable:
    """Sparse table of pairwise intersection sizes ``|d_i & d_j|``.

    Pairs are stored once with ``first < second``, sorted by
    ``(first, second)``. Absent pairs have an empty intersection.
    """

    sizes: np.ndarray
    first: np.ndarray
    second: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        for name in ("sizes", "first", "second", "counts"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.first) == len(self.second) == len(self.counts)):
            raise InternalConsistencyError("pair arrays have different lengths")
        if len(self.first) and not np.all(self.first < self.second):
            raise InternalConsistencyError("pairs must satisfy first < second")
        if np.any(np.diff(self.first * len(self.sizes) + self.second) <= 0):
            raise InternalConsistencyError("pairs must be unique and sorted by (first, second)")

    @classmethod
    def from_dict(cls, counts: Mapping[tuple[int, int], int], sizes) -> "PairOverlapTable":
        items = sorted((min(i, j), max(i, j), c) for (i, j), c in counts.items() if c > 0)
        if items:
            first, second, cnt = map(list, zip(*items))
        else:
            first, second, cnt = [], [], []
        return cls(np.asarray(sizes), np.asarray(first), np.asarray(second), np.asarray(cnt))

    @property
    def n_frames(self) -> int:
        return len(self.sizes)

    def __len__(self) -> int:
        return len(self.counts)

    @cached_property
    def _codes(self) -> np.ndarray:
        return self.first * self.n_frames + self.second

    def as_dict(self) -> dict[tuple[int, int], int]:
        return {
            (i, j): c
            for i, j, c in zip(self.first.tolist(), self.second.tolist(), self.counts.tolist())
        }

    def intersection(self, i: int, j: int) -> int:
        if i == j:
            return int(self.sizes[i])
        return int(self.intersections([i], [j])[0])

    def intersections(self, rows, cols) -> np.ndarray:
        """Vectorized lookup of ``|d_rows[n] & d_cols[n]|``."""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
        out = np.zeros(len(rows), dtype=np.int64)
        if len(self.counts):
            codes = lo * self.n_frames + hi
            pos = np.minimum(np.searchsorted(self._codes, codes), len(self._codes) - 1)
            found = self._codes[pos] == codes
            out[found] = self.counts[pos[found]]
        same = rows == cols
        out[same] = self.sizes[rows[same]]
        return out.astype(np.int64)

    def iou(self, i: int, j: int) -> float:
        return iou_overlap(self.intersection(i, j), int(self.sizes[i]), int(self.sizes[j]))

    def coverage(self, query: int, db: int) -> float:
        return coverage_overlap(self.intersection(query, db), int(self.sizes[query]))

    def iou_values(self) -> np.ndarray:
        """IoU of every stored pair, aligned with ``first``/``second``."""
        union = self.sizes[self.first] + self.sizes[self.second] - self.counts
        return self.counts / union

    def to_csv(self, path) -> None:
        ious = self.iou_values()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["i", "j", "intersection", "size_i", "size_j", "iou"])
            for n, (i, j, c) in enumerate(
                zip(self.first.tolist(), self.second.tolist(), self.counts.tolist())
            ):
                writer.writerow([i, j, c, int(self.sizes[i]), int(self.sizes[j]), repr(float(ious[n]))])

    @classmethod
    def from_csv(cls, path, n_frames: Optional[int] = None) -> "PairOverlapTable":
        first, second, counts, sizes = [], [], [], {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                i, j = int(row["i"]), int(row["j"])
                first.append(i)
                second.append(j)
                counts.append(int(row["intersection"]))
                sizes[i] = int(row["size_i"])
                sizes[j] = int(row["size_j"])
        n = n_frames if n_frames is not None else (max(sizes) + 1 if sizes else 0)
        size_arr = np.zeros(n, dtype=np.int64)
        for k, s in sizes.items():
            size_arr[k] = s
        return cls(size_arr, np.asarray(first), np.asarray(second), np.asarray(counts))


def _count_shard(index: InvertedVoxelIndex, voxel_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = index.n_frames
    k_all = index.multiplicity[voxel_ids]
    chunks = []
    for k in np.unique(k_all):
        sel = voxel_ids[k_all == k]
        # frames of each selected voxel, one row per voxel
        members = index.frames[index.indptr[sel][:, None] + np.arange(k)]
        a, b = np.triu_indices(int(k), 1)
        chunks.append((members[:, a] * n + members[:, b]).reshape(-1))
    if not chunks:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.unique(np.concatenate(chunks), return_counts=True)


def count_pair_intersections(index: InvertedVoxelIndex, workers: int = 1) -> PairOverlapTable:
    """Count ``|d_i & d_j|`` for every frame pair sharing at least one voxel.

    For each voxel, every pair of frames observing it is generated and the
    per-pair occurrences are accumulated. Voxels are processed in shards
    whose partial counts are merged by summation, so the table does not
    depend on ``workers``.
    """
    k = index.multiplicity
    sizes = np.bincount(index.frames, minlength=index.n_frames).astype(np.int64)
    hubs = np.flatnonzero(k > HUB_VOXEL_WARNING)
    if len(hubs):
        log.warning(
            "%d voxel(s) observed by more than %d frames (max %d); pair counting is quadratic in these",
            len(hubs), HUB_VOXEL_WARNING, int(k.max()),
        )
    candidates = np.flatnonzero(k >= 2)
    if len(candidates) == 0:
        return PairOverlapTable(sizes, [], [], [])

    work = k[candidates] * (k[candidates] - 1) // 2
    bounds = np.searchsorted(np.cumsum(work), np.arange(_SHARD_PAIRS, int(work.sum()), _SHARD_PAIRS))
    shards = [s for s in np.split(candidates, np.unique(bounds)) if len(s)]

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partial = list(pool.map(lambda s: _count_shard(index, s), shards))
    else:
        partial = [_count_shard(index, s) for s in shards]

    if len(partial) == 1:
        codes, counts = partial[0]
    else:
        all_codes = np.concatenate([p[0] for p in partial])
        all_counts = np.concatenate([p[1] for p in partial])
        codes, inverse = np.unique(all_codes, return_inverse=True)
        counts = np.bincount(inverse.reshape(-1), weights=all_counts, minlength=len(codes))
        counts = np.rint(counts).astype(np.int64)
    n = index.n_frames
    return PairOverlapTable(sizes, codes // n, codes % n, counts)


def naive_pairwise(sets: FrameVoxelSets, max_frames: int = NAIVE_FRAME_LIMIT) -> PairOverlapTable:
    """Reference pair table by direct intersection of every frame pair.

    Quadratic in the number of frames; intended as a test oracle.
    """
    if sets.n_frames > max_frames:
        raise PipelineError(
            f"naive pairwise oracle refuses {sets.n_frames} frames (limit {max_frames})"
        )
    as_sets = sets.as_tuple_sets()
    eligible = [i for i, s in enumerate(as_sets) if s]
    counts = {}
    for i, j in combinations(eligible, 2):
        common = len(as_sets[i] & as_sets[j])
        if common:
            counts[(i, j)] = common
    return PairOverlapTable.from_dict(counts, [len(s) for s in as_sets])


def coverage_overlap(intersection: int, query_size: int) -> float:
    """Fraction of the query's voxels also seen by the database frame."""
    if query_size <= 0:
        raise DegenerateFrameError("query frame has an empty voxel set")
    if intersection < 0 or intersection > query_size:
        raise InternalConsistencyError(
            f"intersection {intersection} inconsistent with query size {query_size}"
        )
    return intersection / query_size


def iou_overlap(intersection: int, size_i: int, size_j: int) -> float:
    """Intersection over union of two voxel sets given their sizes."""
    if size_i <= 0 or size_j <= 0:
        raise InternalConsistencyError(f"IoU of empty voxel set (sizes {size_i}, {size_j})")
    if intersection < 0 or intersection > min(size_i, size_j):
        raise InternalConsistencyError(
            f"intersection {intersection} exceeds set sizes {size_i}, {size_j}"
        )
    return intersection / (size_i + size_j - intersection)
