"""Overlap graph construction and dominating-set database selection.

Frames are vertices; two frames are joined when their voxel IoU is
strictly greater than the overlap threshold. Any dominating set of this
graph is a database with zero coverage loss, and a minimum one is the
smallest such database.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, InternalConsistencyError, PipelineError
from .overlap import PairOverlapTable

__all__ = [
    "OverlapGraph",
    "DatabaseSelection",
    "build_graph",
    "coverage_loss",
    "greedy_dominating_set",
    "exact_dominating_set",
    "assign_classes",
    "select_database",
    "EXACT_VERTEX_LIMIT",
]

EXACT_VERTEX_LIMIT = 20


def _check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"overlap threshold must lie in (0, 1), got {threshold}")
    return threshold


@dataclass(frozen=True)
class OverlapGraph:
    """Undirected graph over eligible frames with IoU edge weights.

    ``edges`` is an ``(E, 2)`` array with ``edges[:, 0] < edges[:, 1]``;
    ``weights[e]`` is the IoU of that pair and always exceeds ``threshold``.
    """

    vertices: tuple
    edges: np.ndarray
    weights: np.ndarray
    threshold: float

    def __post_init__(self):
        vertices = tuple(sorted(int(v) for v in self.vertices))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(edges) != len(weights):
            raise InternalConsistencyError("edge and weight arrays differ in length")
        if len(edges):
            if np.any(edges[:, 0] == edges[:, 1]):
                raise InternalConsistencyError("self-loop in overlap graph")
            edges = np.sort(edges, axis=1)
            if not np.isin(edges, vertices).all():
                raise InternalConsistencyError("edge endpoint is not a vertex")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.vertices)

    @cached_property
    def adjacency(self) -> dict[int, dict[int, float]]:
        """Neighbor -> IoU weight, per vertex."""
        adj: dict[int, dict[int, float]] = {v: {} for v in self.vertices}
        for (a, b), w in zip(self.edges.tolist(), self.weights.tolist()):
            adj[a][b] = w
            adj[b][a] = w
        return adj

    def closed_neighborhood(self, v: int) -> set[int]:
        return {v, *self.adjacency[v]}


@dataclass(frozen=True)
class DatabaseSelection:
    db_ids: tuple
    class_of: Mapping[int, int]
    threshold: float
    algorithm: str
    class_iou: Mapping[int, float] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.db_ids)


def build_graph(table: PairOverlapTable, threshold: float, vertices: Optional[Iterable[int]] = None) -> OverlapGraph:
    """Keep the pairs whose IoU is strictly above ``threshold``.

    Vertices default to every frame with a non-empty voxel set.
    """
    threshold = _check_threshold(threshold)
    if vertices is None:
        vertices = np.flatnonzero(table.sizes > 0).tolist()
    ious = table.iou_values()
    keep = ious > threshold
    edges = np.stack([table.first[keep], table.second[keep]], axis=1)
    return OverlapGraph(tuple(vertices), edges, ious[keep], threshold)


def coverage_loss(candidate: Iterable[int], graph: OverlapGraph) -> int:
    """Number of vertices neither in ``candidate`` nor adjacent to it."""
    candidate = set(int(c) for c in candidate)
    unknown = candidate.difference(graph.adjacency)
    if unknown:
        raise ValueError(f"candidate contains ids that are not graph vertices: {sorted(unknown)}")
    covered = set(candidate)
    for c in candidate:
        covered.update(graph.adjacency[c])
    return len(graph.vertices) - len(covered)


def greedy_dominating_set(graph: OverlapGraph) -> DatabaseSelection:
    """Greedy dominating set.

    Repeatedly takes the vertex whose closed neighborhood contains the most
    still-uncovered vertices, breaking ties by the smallest frame id.
    Gains only shrink as coverage grows, so stale heap entries are
    re-scored lazily without changing the selection order.
    """
    if not graph.vertices:
        raise PipelineError("cannot select a database from an empty graph")
    adj = graph.adjacency
    uncovered = set(graph.vertices)
    heap = [(-(len(adj[v]) + 1), v) for v in graph.vertices]
    heapq.heapify(heap)
    chosen = []
    while uncovered:
        neg_gain, v = heapq.heappop(heap)
        gain = (v in uncovered) + sum(1 for u in adj[v] if u in uncovered)
        if gain == -neg_gain:
            chosen.append(v)
            uncovered.discard(v)
            uncovered.difference_update(adj[v])
        elif gain > 0:
            heapq.heappush(heap, (-gain, v))
    db_ids = tuple(sorted(chosen))
    class_of, class_iou = _assign_on_graph(db_ids, graph)
    return DatabaseSelection(db_ids, class_of, graph.threshold, "greedy", class_iou)


def exact_dominating_set(graph: OverlapGraph, vertex_limit: int = EXACT_VERTEX_LIMIT) -> DatabaseSelection:
    """Minimum dominating set by branch and bound.

    Candidate sets are grown in increasing id order for sizes 1, 2, ...
    so the first dominating set found is the lexicographically smallest
    among those of minimum size. A branch is cut when the lowest
    undominated vertex can no longer be reached by any remaining id, or
    when the remaining picks cannot cover what is left even at maximum
    neighborhood size.
    """
    n = len(graph.vertices)
    if n == 0:
        raise PipelineError("cannot select a database from an empty graph")
    if n > vertex_limit:
        raise ConfigError(
            f"exact solver refuses a graph with {n} vertices (limit {vertex_limit}); use the greedy selector"
        )
    verts = graph.vertices
    pos = {v: i for i, v in enumerate(verts)}
    closed = []
    for v in verts:
        mask = 1 << pos[v]
        for u in graph.adjacency[v]:
            mask |= 1 << pos[u]
        closed.append(mask)
    full = (1 << n) - 1
    # highest position able to dominate each vertex
    last_dominator = [max(i for i in range(n) if closed[i] >> p & 1) for p in range(n)]
    max_cover = max(bin(m).count("1") for m in closed)

    def search(start: int, covered: int, left: int, picked: list) -> Optional[list]:
        if covered == full:
            return picked
        if left == 0:
            return None
        missing = full & ~covered
        if bin(missing).count("1") > left * max_cover:
            return None
        lowest = (missing & -missing).bit_length() - 1
        if last_dominator[lowest] < start:
            return None
        for i in range(start, n - left + 1 if left > 0 else n):
            found = search(i + 1, covered | closed[i], left - 1, picked + [i])
            if found is not None:
                return found
            if i >= last_dominator[lowest]:
                break
        return None

    for size in range(1, n + 1):
        found = search(0, 0, size, [])
        if found is not None:
            db_ids = tuple(verts[i] for i in found)
            class_of, class_iou = _assign_on_graph(db_ids, graph)
            return DatabaseSelection(db_ids, class_of, graph.threshold, "exact", class_iou)
    raise InternalConsistencyError("no dominating set found; the full vertex set always dominates")


def _assign_on_graph(db_ids, graph: OverlapGraph) -> tuple[dict[int, int], dict[int, float]]:
    db = set(db_ids)
    class_of: dict[int, int] = {}
    class_iou: dict[int, float] = {}
    for v in graph.vertices:
        if v in db:
            class_of[v], class_iou[v] = v, 1.0
            continue
        best = None
        for u, w in graph.adjacency[v].items():
            if u in db and (best is None or w > best[1] or (w == best[1] and u < best[0])):
                best = (u, w)
        if best is None:
            raise InternalConsistencyError(
                f"frame {v} has no database neighbor above threshold {graph.threshold}"
            )
        class_of[v], class_iou[v] = best
    return class_of, class_iou


def assign_classes(db_ids: Iterable[int], table: PairOverlapTable, threshold: float) -> dict[int, int]:
    """Map every eligible frame to its highest-IoU database neighbor.

    Database frames map to themselves; ties go to the smaller database id.
    """
    graph = build_graph(table, threshold)
    db_ids = tuple(sorted(int(d) for d in db_ids))
    unknown = set(db_ids).difference(graph.vertices)
    if unknown:
        raise ValueError(f"database ids are not eligible frames: {sorted(unknown)}")
    return _assign_on_graph(db_ids, graph)[0]


def select_database(
    table: PairOverlapTable,
    threshold: float,
    selector: str = "greedy",
    vertex_limit: int = EXACT_VERTEX_LIMIT,
) -> DatabaseSelection:
    graph = build_graph(table, threshold)
    if selector == "greedy":
        selection = greedy_dominating_set(graph)
    elif selector == "exact":
        selection = exact_dominating_set(graph, vertex_limit)
    else:
        raise ConfigError(f"unknown selector {selector!r}; expected 'greedy' or 'exact'")
    if coverage_loss(selection.db_ids, graph) != 0:
        raise InternalConsistencyError("selected database leaves frames uncovered")
    return selection
