"""End-to-end orchestration: load, voxelize, overlap, select, report.

Output files written into ``config.out``:

``database.txt``
    selected frame ids, one per line, ascending
``classes.csv``
    ``frame_id,class_db_id,iou`` for every eligible frame
``stats.json``
    database statistics
``train.csv`` / ``val.csv``
    fine-tuning manifests ``frame_id,class_db_id,color_path``
``overlap.csv``
    pair table, only with ``write_overlap``
``retrieval.csv`` / ``recall.json``
    retrieval report and summary from :func:`run_eval`
``sweep.csv`` / ``sweep.json``
    one row per threshold from :func:`run_sweep`
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .geometry import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_STRIDE,
    frame_to_world_points,
    synthesize_depth_from_map,
    voxelize,
)
from .metrics import (
    DatabaseStats,
    DescriptorSet,
    RetrievalResult,
    compute_stats,
    export_finetune_split,
    load_descriptors,
    recall_at_k,
    write_stats_json,
)
from .overlap import (
    FrameVoxelSets,
    InvertedVoxelIndex,
    PairOverlapTable,
    build_inverted_index,
    count_pair_intersections,
)
from .selection import EXACT_VERTEX_LIMIT, DatabaseSelection, select_database
from .sequence_io import (
    LoadOptions,
    ScanSequence,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    load_sequence,
    read_depth,
)

log = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "BuildResult",
    "load_config",
    "compute_voxel_sets",
    "run_build",
    "run_eval",
    "run_sweep",
]

DEFAULT_VOXEL_SIZE = 0.3
DEFAULT_THRESHOLD = 0.3
DEFAULT_SWEEP = (0.1, 0.3, 0.5)


@dataclass(frozen=True)
class PipelineConfig:
    input_root: Optional[Path] = None
    voxel_size: float = DEFAULT_VOXEL_SIZE
    threshold: float = DEFAULT_THRESHOLD
    stride: int = DEFAULT_STRIDE
    max_depth: float = DEFAULT_MAX_DEPTH
    selector: str = "greedy"
    exact_vertex_limit: int = EXACT_VERTEX_LIMIT
    out: Path = Path("vprdb_out")
    format: str = "default"
    max_dt: float = 0.02
    extend_depth: bool = False
    workers: int = 1
    write_overlap: bool = False
    db_descriptors: Optional[Path] = None
    query_descriptors: Optional[Path] = None
    query_root: Optional[Path] = None
    k: int = 1
    gt_threshold: float = 0.3
    synthetic: Optional[SyntheticSceneSpec] = None
    seed: int = 0
    # "start:stop" slice of the scan, for scans split into several databases
    frame_range: Optional[str] = None

    def __post_init__(self):
        for name in ("input_root", "out", "db_descriptors", "query_descriptors", "query_root"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, Path):
                object.__setattr__(self, name, Path(value))
        for name in ("voxel_size", "stride", "max_depth", "exact_vertex_limit", "max_dt", "workers", "k"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"overlap threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.gt_threshold < 1.0:
            raise ConfigError(f"gt_threshold must lie in [0, 1), got {self.gt_threshold}")
        if self.selector not in ("greedy", "exact"):
            raise ConfigError(f"unknown selector {self.selector!r}; expected 'greedy' or 'exact'")
        if self.frame_range is not None:
            _parse_range(self.frame_range)

    def load_options(self, *, sliced: bool = True) -> LoadOptions:
        frame_range = _parse_range(self.frame_range) if sliced and self.frame_range else None
        return LoadOptions(format=self.format, max_dt=self.max_dt, frame_range=frame_range)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _parse_range(text: str) -> tuple[int, Optional[int]]:
    start, sep, stop = str(text).partition(":")
    try:
        if not sep:
            raise ValueError
        first = int(start) if start.strip() else 0
        last = int(stop) if stop.strip() else None
    except ValueError:
        raise ConfigError(f"frame_range must look like start:stop, got {text!r}") from None
    if first < 0 or (last is not None and last <= first):
        raise ConfigError(f"empty or negative frame_range {text!r}")
    return first, last


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        try:
            return _BOOL[raw.strip().lower()]
        except KeyError:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read a ``key = value`` config file and apply keyword overrides.

    Keys are :class:`PipelineConfig` field names; ``synthetic.<field>``
    keys describe a synthetic scene. Overrides set to ``None`` are ignored.
    """
    defaults = {f.name: f.default for f in dataclasses.fields(PipelineConfig)}
    synth_defaults = {f.name: f.default for f in dataclasses.fields(SyntheticSceneSpec)}
    values: dict = {}
    synth: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key.startswith("synthetic."):
                name = key[len("synthetic."):]
                if name not in synth_defaults:
                    raise ConfigError(f"{path}:{lineno}: unknown synthetic key {name!r}")
                synth[name] = _coerce(key, raw, synth_defaults[name])
            elif key in defaults and key != "synthetic":
                default = defaults[key]
                values[key] = _coerce(key, raw, default) if default is not None else raw
            else:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    if synth and "synthetic" not in values:
        values["synthetic"] = SyntheticSceneSpec(**synth)
    return PipelineConfig(**values)


def _frame_voxels(frame, sequence: ScanSequence, config: PipelineConfig, map_voxels=None) -> np.ndarray:
    depth = read_depth(frame.depth_path)
    if map_voxels is not None:
        depth = synthesize_depth_from_map(
            map_voxels, config.voxel_size, frame.pose, sequence.intrinsics, existing=depth
        )
    points = frame_to_world_points(
        depth, sequence.intrinsics, frame.pose, stride=config.stride, max_depth=config.max_depth
    )
    return voxelize(points, config.voxel_size)


def compute_voxel_sets(
    sequence: ScanSequence, config: PipelineConfig, only: Optional[Iterable[int]] = None
) -> FrameVoxelSets:
    """Voxel set of every frame; frames outside ``only`` get an empty set.

    With ``extend_depth`` the map built from all frames is rendered into
    each frame to fill pixels the sensor left without depth.
    """
    wanted = None if only is None else set(int(i) for i in only)

    def needed(frame_id: int) -> bool:
        return wanted is None or frame_id in wanted

    empty = np.empty((0, 3), dtype=np.int64)
    if config.extend_depth:
        base = [_frame_voxels(f, sequence, config) for f in sequence.frames]
        nonempty = [s for s in base if len(s)]
        if not nonempty:
            return FrameVoxelSets(tuple(base))
        map_voxels = np.unique(np.concatenate(nonempty), axis=0)
        sets = [
            _frame_voxels(f, sequence, config, map_voxels) if needed(f.id) else empty
            for f in sequence.frames
        ]
    else:
        sets = [_frame_voxels(f, sequence, config) if needed(f.id) else empty for f in sequence.frames]
    return FrameVoxelSets(tuple(sets))


def _scan(config: PipelineConfig) -> tuple[ScanSequence, FrameVoxelSets]:
    if config.input_root is not None:
        sequence = load_sequence(config.input_root, config.load_options())
        return sequence, compute_voxel_sets(sequence, config)
    if config.synthetic is not None:
        sequence, sets = generate_synthetic_scene(config.synthetic)
        if config.frame_range:
            start, stop = _parse_range(config.frame_range)
            sequence = sequence.subsequence(start, stop)
            sets = FrameVoxelSets(sets.sets[start:stop])
        return sequence, sets
    raise ConfigError("no input: set input_root or a synthetic scene")


@dataclass(frozen=True)
class BuildResult:
    selection: DatabaseSelection
    stats: DatabaseStats
    sequence: ScanSequence
    sets: FrameVoxelSets
    index: InvertedVoxelIndex
    table: PairOverlapTable


def _overlap(sets: FrameVoxelSets, config: PipelineConfig) -> tuple[InvertedVoxelIndex, PairOverlapTable]:
    index = build_inverted_index(sets)
    table = count_pair_intersections(index, workers=config.workers)
    log.info(
        "%d frames (%d without voxels), %d map voxels, %d overlapping pairs",
        sets.n_frames, len(sets.excluded_ids), index.n_voxels, len(table),
    )
    return index, table


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines))


def _write_build_outputs(out: Path, result: BuildResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    sel = result.selection
    _write_lines(out / "database.txt", [str(i) for i in sel.db_ids])
    with open(out / "classes.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "class_db_id", "iou"])
        for frame_id in sorted(sel.class_of):
            writer.writerow([frame_id, sel.class_of[frame_id], repr(float(sel.class_iou[frame_id]))])
    write_stats_json(out / "stats.json", result.stats)
    train, val = export_finetune_split(sel.class_of, result.sequence)
    header = "frame_id,class_db_id,color_path"
    _write_lines(out / "train.csv", [header] + train)
    _write_lines(out / "val.csv", [header] + val)


def run_build(config: PipelineConfig) -> BuildResult:
    """Build the database for ``config`` and write its manifests."""
    sequence, sets = _scan(config)
    index, table = _overlap(sets, config)
    selection = select_database(table, config.threshold, config.selector, config.exact_vertex_limit)
    stats = compute_stats(selection, sets, index)
    log.info("%s", stats.summary())
    result = BuildResult(selection, stats, sequence, sets, index, table)
    _write_build_outputs(config.out, result)
    if config.write_overlap:
        table.to_csv(config.out / "overlap.csv")
    return result


def run_sweep(config: PipelineConfig, thresholds: Sequence[float] = DEFAULT_SWEEP) -> list[DatabaseStats]:
    """Database statistics for several thresholds over one shared pair table."""
    if not thresholds:
        raise ConfigError("sweep needs at least one threshold")
    unique = []
    for mu in thresholds:
        if float(mu) in unique:
            log.warning("duplicate threshold %g ignored", mu)
            continue
        unique.append(float(mu))
    sequence, sets = _scan(config)
    index, table = _overlap(sets, config)
    rows = []
    for mu in unique:
        selection = select_database(table, mu, config.selector, config.exact_vertex_limit)
        stats = compute_stats(selection, sets, index)
        log.info("%s", stats.summary())
        rows.append(stats)

    config.out.mkdir(parents=True, exist_ok=True)
    with open(config.out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "sequence_size", "db_size", "reduction_rate", "spatial_coverage_percent"])
        for s in rows:
            writer.writerow([repr(s.threshold), s.sequence_size, s.db_size, repr(s.reduction_rate), repr(s.spatial_coverage)])
    payload = [dict(threshold=s.threshold, **s.to_json_dict()) for s in rows]
    (config.out / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return rows


def read_database_manifest(path) -> list[int]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"database manifest {path} not found; run build first")
    ids = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            ids.append(int(line))
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad frame id {line!r}") from None
    if not ids:
        raise InputError(f"{path}: empty database")
    return ids


def run_eval(config: PipelineConfig) -> RetrievalResult:
    """Recall@k of precomputed descriptors against the built database.

    Query frames are voxelized with the scan's voxel size; a retrieved
    database frame is correct when it covers more than ``gt_threshold`` of
    the query's voxels.
    """
    if config.db_descriptors is None or config.query_descriptors is None:
        raise ConfigError("eval needs db_descriptors and query_descriptors")
    if config.input_root is None:
        raise ConfigError("eval needs the scan input_root")
    db_ids = read_database_manifest(config.out / "database.txt")
    scan = load_sequence(config.input_root, config.load_options())
    query_root = config.query_root or config.input_root
    try:
        queries = load_sequence(query_root, config.load_options(sliced=config.query_root is None))
    except InputError as exc:
        if str(exc) == "no frames":
            raise InputError("no queries") from None
        raise
    if queries.intrinsics != scan.intrinsics:
        log.warning("query intrinsics differ from the scan intrinsics")
    if max(db_ids) >= len(scan):
        raise InputError(f"database id {max(db_ids)} outside scan of {len(scan)} frames")

    db_desc = load_descriptors(config.db_descriptors)
    q_desc = load_descriptors(config.query_descriptors)
    offset = len(scan)
    q_ids = np.arange(len(queries), dtype=np.int64)
    merged = DescriptorSet(
        np.concatenate([np.asarray(db_ids), q_ids + offset]),
        np.concatenate([db_desc.rows(db_ids), q_desc.rows(q_ids)]),
    )

    db_sets = compute_voxel_sets(scan, config, only=db_ids)
    q_sets = compute_voxel_sets(queries, config)
    combined = FrameVoxelSets(db_sets.sets + q_sets.sets)
    _, table = _overlap(combined, config)
    if not np.any(table.intersections(np.repeat(q_ids + offset, len(db_ids)), np.tile(db_ids, len(q_ids)))):
        log.warning("no query frame shares a voxel with the database; are both in one world frame?")

    result = recall_at_k(db_ids, q_ids + offset, merged, config.k, table, config.gt_threshold)
    config.out.mkdir(parents=True, exist_ok=True)
    result.to_csv(config.out / "retrieval.csv", query_label=lambda q: q - offset)
    summary = {
        "k": result.k,
        "recall": result.recall,
        "evaluated_queries": result.evaluated,
        "total_queries": len(queries),
        "queries_without_gt": len(result.queries_without_gt),
        "gt_threshold": config.gt_threshold,
        "db_size": len(db_ids),
    }
    (config.out / "recall.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("recall@%d = %.4f over %d queries (%d without ground truth)",
             result.k, result.recall, result.evaluated, len(result.queries_without_gt))
    return result
