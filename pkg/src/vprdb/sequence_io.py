"""Reading and writing RGBD scanning sequences, plus synthetic test scenes.

On-disk layout of a sequence directory::

    trajectory.txt     timestamp tx ty tz qx qy qz qw   (camera-to-world)
    intrinsics.txt     fx=..  fy=..  cx=..  cy=..  width=..  height=..  depth_scale=..
    depth/<timestamp>.png   16-bit depth, raw * depth_scale = meters, 0 invalid
    rgb/<timestamp>.png     optional color images
    associations.txt   optional "frame_id depth_file [color_file]" lines

Without ``associations.txt`` depth (and color) files are matched to
trajectory entries by nearest timestamp.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError
from .geometry import CameraIntrinsics, DepthImage, PoseSE3
from .overlap import FrameVoxelSets

log = logging.getLogger(__name__)

__all__ = [
    "FrameRecord",
    "ScanSequence",
    "LoadOptions",
    "SyntheticSceneSpec",
    "load_sequence",
    "load_seven_scenes",
    "associate_streams",
    "read_intrinsics",
    "write_intrinsics",
    "read_trajectory",
    "read_depth",
    "write_depth",
    "write_sequence",
    "generate_synthetic_scene",
    "render_synthetic_depth",
    "write_synthetic_scene",
]

TRAJECTORY_FILE = "trajectory.txt"
INTRINSICS_FILE = "intrinsics.txt"
ASSOCIATIONS_FILE = "associations.txt"
DEPTH_DIR = "depth"
COLOR_DIR = "rgb"
_IMAGE_SUFFIXES = (".png",)


@dataclass(frozen=True)
class FrameRecord:
    id: int
    timestamp: float
    depth_path: Path
    pose: PoseSE3
    color_path: Optional[Path] = None


@dataclass(frozen=True)
class ScanSequence:
    frames: tuple
    intrinsics: CameraIntrinsics
    dropped: int = 0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InputError("no frames")
        if [f.id for f in frames] != list(range(len(frames))):
            raise InputError("frame ids must be contiguous from 0")
        ts = [f.timestamp for f in frames]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InputError("frame timestamps must be non-decreasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i: int) -> FrameRecord:
        return self.frames[i]

    @property
    def N(self) -> int:
        return len(self.frames)

    def subsequence(self, start: int, stop: Optional[int] = None) -> "ScanSequence":
        """Frames ``start`` to ``stop`` (exclusive), renumbered from 0."""
        if start < 0 or (stop is not None and stop <= start):
            raise ConfigError(f"bad frame range {start}:{stop}")
        picked = self.frames[start:stop]
        if not picked:
            raise InputError("no frames")
        frames = tuple(dataclasses.replace(f, id=k) for k, f in enumerate(picked))
        return ScanSequence(frames, self.intrinsics, self.dropped)


@dataclass(frozen=True)
class LoadOptions:
    format: str = "default"
    max_dt: float = 0.02
    trajectory: str = TRAJECTORY_FILE
    intrinsics: str = INTRINSICS_FILE
    depth_dir: str = DEPTH_DIR
    color_dir: str = COLOR_DIR
    # (start, stop) over the loaded frames; stop None runs to the end
    frame_range: Optional[tuple[int, Optional[int]]] = None


def associate_streams(color_ts: Sequence[float], depth_ts: Sequence[float], max_dt: float) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp matching of two sorted timestamp lists.

    Candidate pairs within ``max_dt`` are accepted closest first, each
    index at most once. The result is sorted and strictly increasing in
    both indices.
    """
    color_ts = np.asarray(color_ts, dtype=np.float64)
    depth_ts = np.asarray(depth_ts, dtype=np.float64)
    if len(color_ts) == 0 or len(depth_ts) == 0:
        return []
    candidates = []
    for i, t in enumerate(color_ts.tolist()):
        lo = np.searchsorted(depth_ts, t - max_dt, side="left")
        hi = np.searchsorted(depth_ts, t + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(depth_ts[j] - t)
            if dt <= max_dt:
                candidates.append((dt, i, j))
    candidates.sort()
    used_c, used_d, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_c or j in used_d:
            continue
        used_c.add(i)
        used_d.add(j)
        pairs.append((i, j))
    pairs.sort()
    monotone = []
    for i, j in pairs:
        if not monotone or j > monotone[-1][1]:
            monotone.append((i, j))
    return monotone


def _parse_key_values(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise InputError(f"{path}:{lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing intrinsics file {path}")
    values = _parse_key_values(path)
    try:
        return CameraIntrinsics(
            fx=float(values["fx"]),
            fy=float(values["fy"]),
            cx=float(values["cx"]),
            cy=float(values["cy"]),
            width=int(values["width"]),
            height=int(values["height"]),
            depth_scale=float(values.get("depth_scale", 0.001)),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing intrinsics key {exc}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    lines = [
        f"fx={intrinsics.fx!r}",
        f"fy={intrinsics.fy!r}",
        f"cx={intrinsics.cx!r}",
        f"cy={intrinsics.cy!r}",
        f"width={intrinsics.width}",
        f"height={intrinsics.height}",
        f"depth_scale={intrinsics.depth_scale!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[tuple[float, PoseSE3]]:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` lines are comments."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing trajectory file {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        try:
            if len(parts) != 8:
                raise ValueError(f"expected 8 fields, got {len(parts)}")
            ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            if not all(math.isfinite(x) for x in (ts, tx, ty, tz, qx, qy, qz, qw)):
                raise ValueError("non-finite value")
            pose = PoseSE3.from_quaternion(qw, qx, qy, qz, tx, ty, tz)
        except (ValueError, ConfigError) as exc:
            raise InputError(f"{path}:{lineno}: unparsable pose line ({exc})") from None
        entries.append((ts, pose))
    return entries


def read_depth(path) -> DepthImage:
    try:
        with Image.open(path) as img:
            values = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read depth image {path}: {exc}") from None
    if values.ndim != 2:
        raise InputError(f"depth image {path} is not single-channel")
    return DepthImage(values.astype(np.uint16, copy=False))


def write_depth(path, depth: DepthImage) -> None:
    Image.fromarray(np.ascontiguousarray(depth.values, dtype=np.uint16)).save(path)


def _timestamped_files(directory: Path) -> tuple[list[float], list[Path]]:
    found = []
    if directory.is_dir():
        for p in directory.iterdir():
            if p.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            try:
                found.append((float(p.stem), p))
            except ValueError:
                log.warning("skipping %s: file name is not a timestamp", p)
    found.sort()
    return [t for t, _ in found], [p for _, p in found]


def _read_associations(path: Path, root: Path) -> dict[int, tuple[Path, Optional[Path]]]:
    table = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) not in (2, 3):
            raise InputError(f"{path}:{lineno}: expected 'frame_id depth_file [color_file]'")
        try:
            frame_id = int(parts[0])
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad frame id {parts[0]!r}") from None
        color = root / parts[2] if len(parts) == 3 else None
        table[frame_id] = (root / parts[1], color)
    return table


def load_sequence(root, options: Optional[LoadOptions] = None) -> ScanSequence:
    """Load a scanning sequence directory.

    Frames without a resolvable depth image are dropped and counted in
    ``ScanSequence.dropped``.
    """
    options = options or LoadOptions()
    root = Path(root)
    if options.format == "7scenes":
        sequence = load_seven_scenes(root)
    elif options.format == "default":
        sequence = _load_default(root, options)
    else:
        raise ConfigError(f"unknown sequence format {options.format!r}")
    if options.frame_range is not None:
        sequence = sequence.subsequence(*options.frame_range)
    return sequence


def _load_default(root: Path, options: LoadOptions) -> ScanSequence:
    if not root.is_dir():
        raise InputError(f"sequence directory {root} does not exist")

    intrinsics = read_intrinsics(root / options.intrinsics)
    entries = read_trajectory(root / options.trajectory)
    if not entries:
        raise InputError("no frames")
    order = sorted(range(len(entries)), key=lambda i: entries[i][0])
    entries = [entries[i] for i in order]

    depth_of: dict[int, Path] = {}
    color_of: dict[int, Path] = {}
    assoc_path = root / ASSOCIATIONS_FILE
    if assoc_path.is_file():
        for frame_id, (depth, color) in _read_associations(assoc_path, root).items():
            if not 0 <= frame_id < len(entries):
                raise InputError(f"{assoc_path}: frame id {frame_id} outside trajectory")
            depth_of[frame_id] = depth
            if color is not None:
                color_of[frame_id] = color
    else:
        stamps = [t for t, _ in entries]
        depth_ts, depth_files = _timestamped_files(root / options.depth_dir)
        for i, j in associate_streams(stamps, depth_ts, options.max_dt):
            depth_of[i] = depth_files[j]
        color_ts, color_files = _timestamped_files(root / options.color_dir)
        for i, j in associate_streams(stamps, color_ts, options.max_dt):
            color_of[i] = color_files[j]

    frames, dropped = [], 0
    for n, (ts, pose) in enumerate(entries):
        depth = depth_of.get(n)
        if depth is None or not depth.is_file():
            dropped += 1
            continue
        frames.append(FrameRecord(len(frames), ts, depth, pose, color_of.get(n)))
    if dropped:
        log.warning("%s: dropped %d of %d frames without depth", root, dropped, len(entries))
    if not frames:
        raise InputError("no frames")
    return ScanSequence(tuple(frames), intrinsics, dropped)


SEVEN_SCENES_INTRINSICS = CameraIntrinsics(585.0, 585.0, 320.0, 240.0, 640, 480, 0.001)
_SEVEN_SCENES_FPS = 30.0


def load_seven_scenes(root) -> ScanSequence:
    """Read a 7-Scenes scene or ``seq-XX`` directory.

    A scene directory with ``TrainSplit.txt`` loads the listed training
    sequences in order; otherwise every ``seq-*`` subdirectory is used, or
    ``root`` itself when it holds ``frame-*.pose.txt`` files. Depth values
    of 65535 are treated as invalid.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"sequence directory {root} does not exist")
    split = root / "TrainSplit.txt"
    if split.is_file():
        seq_dirs = []
        for line in split.read_text().split():
            m = re.search(r"(\d+)$", line)
            if m:
                seq_dirs.append(root / f"seq-{int(m.group(1)):02d}")
    else:
        seq_dirs = sorted(p for p in root.glob("seq-*") if p.is_dir()) or [root]

    frames, dropped = [], 0
    for seq in seq_dirs:
        for pose_path in sorted(seq.glob("frame-*.pose.txt")):
            stem = pose_path.name[: -len(".pose.txt")]
            depth = seq / f"{stem}.depth.png"
            color = seq / f"{stem}.color.png"
            if not depth.is_file():
                dropped += 1
                continue
            try:
                matrix = np.loadtxt(pose_path).reshape(4, 4)
                pose = PoseSE3.from_matrix(matrix)
            except (ValueError, ConfigError) as exc:
                raise InputError(f"{pose_path}: unparsable pose ({exc})") from None
            frames.append(
                FrameRecord(
                    len(frames),
                    len(frames) / _SEVEN_SCENES_FPS,
                    depth,
                    pose,
                    color if color.is_file() else None,
                )
            )
    if not frames:
        raise InputError("no frames")
    return ScanSequence(tuple(frames), SEVEN_SCENES_INTRINSICS, dropped)


def write_sequence(root, sequence: ScanSequence, depths: Sequence[DepthImage]) -> ScanSequence:
    """Write ``sequence`` and its depth images in the standard layout.

    Returns the sequence with depth paths pointing at the written files.
    """
    root = Path(root)
    (root / DEPTH_DIR).mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / INTRINSICS_FILE, sequence.intrinsics)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    frames = []
    for frame, depth in zip(sequence.frames, depths, strict=True):
        w, x, y, z = frame.pose.rotation
        tx, ty, tz = frame.pose.translation
        lines.append(" ".join(repr(float(v)) for v in (frame.timestamp, tx, ty, tz, x, y, z, w)))
        path = root / DEPTH_DIR / f"{frame.timestamp:.6f}.png"
        write_depth(path, depth)
        frames.append(FrameRecord(frame.id, frame.timestamp, path, frame.pose, frame.color_path))
    (root / TRAJECTORY_FILE).write_text("\n".join(lines) + "\n")
    return ScanSequence(tuple(frames), sequence.intrinsics, sequence.dropped)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Parameters of a synthetic floor scan with closed-form voxel sets.

    ``corridor``: frame k sees voxels ``k*s .. k*s + view_extent - 1`` along
    x, with ``s = step / voxel_size``. ``grid-room``: a seeded lattice
    random walk of step ``s`` inside a ``3*view_extent`` square room; each
    frame sees a ``view_extent x view_extent`` patch of floor voxels.
    """

    kind: str = "corridor"
    frame_count: int = 10
    step: float = 1.5
    view_extent: int = 10
    voxel_size: float = 0.3
    seed: int = 0
    pixels_per_voxel: int = 8
    camera_height: float = 1.0
    frame_interval: float = 0.1

    def __post_init__(self):
        if self.kind not in ("corridor", "grid-room"):
            raise ConfigError(f"unknown synthetic scene kind {self.kind!r}")
        if self.frame_count < 1:
            raise ConfigError("frame_count must be at least 1")
        if not self.step > 0:
            raise ConfigError("step must be positive")
        if self.view_extent < 1:
            raise ConfigError("view_extent must be at least 1")
        if not self.voxel_size > 0:
            raise ConfigError("voxel_size must be positive")
        if self.pixels_per_voxel < 1 or not self.camera_height > 0:
            raise ConfigError("pixels_per_voxel and camera_height must be positive")
        ratio = self.step / self.voxel_size
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigError(
                f"step {self.step} is not an integer multiple of voxel_size {self.voxel_size}"
            )

    @property
    def cells_per_step(self) -> int:
        return int(round(self.step / self.voxel_size))

    def patches(self) -> list[tuple[int, int, int, int]]:
        """Per frame ``(x0, y0, extent_x, extent_y)`` in voxel units."""
        s, e = self.cells_per_step, self.view_extent
        if self.kind == "corridor":
            return [(k * s, 0, e, 1) for k in range(self.frame_count)]
        room = 3 * e
        top = room - e
        rng = np.random.default_rng(self.seed)
        x, y = (int(c) for c in rng.integers(0, top + 1, size=2))
        out = [(x, y, e, e)]
        moves = ((s, 0), (-s, 0), (0, s), (0, -s))
        for _ in range(1, self.frame_count):
            valid = [(dx, dy) for dx, dy in moves if 0 <= x + dx <= top and 0 <= y + dy <= top]
            if valid:
                dx, dy = valid[int(rng.integers(len(valid)))]
                x, y = x + dx, y + dy
            out.append((x, y, e, e))
        return out


def _synthetic_intrinsics(spec: SyntheticSceneSpec, ex: int, ey: int) -> CameraIntrinsics:
    p = spec.pixels_per_voxel
    w, h = ex * p, ey * p
    f = p * spec.camera_height / spec.voxel_size
    return CameraIntrinsics(f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h, 0.001)


def _synthetic_pose(spec: SyntheticSceneSpec, patch) -> PoseSE3:
    x0, y0, ex, ey = patch
    v = spec.voxel_size
    # looking straight down: camera axes (x, y, z) -> world (x, -y, -z)
    return PoseSE3(
        (0.0, 1.0, 0.0, 0.0),
        ((x0 + ex / 2.0) * v, (y0 + ey / 2.0) * v, 0.5 * v + spec.camera_height),
    )


def render_synthetic_depth(spec: SyntheticSceneSpec, frame_id: int) -> DepthImage:
    """Depth image of frame ``frame_id``: a flat floor at ``camera_height``."""
    x0, y0, ex, ey = spec.patches()[frame_id]
    intr = _synthetic_intrinsics(spec, ex, ey)
    raw = int(round(spec.camera_height / intr.depth_scale))
    if abs(raw * intr.depth_scale - spec.camera_height) > 1e-9:
        raise ConfigError("camera_height must be a whole number of millimeters")
    return DepthImage(np.full(intr.shape, raw, dtype=np.uint16))


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> tuple[ScanSequence, FrameVoxelSets]:
    """Sequence metadata and the exact voxel set each frame observes.

    Depth paths are relative (``depth/<timestamp>.png``) until the scene is
    written with :func:`write_synthetic_scene`.
    """
    patches = spec.patches()
    _, _, ex, ey = patches[0]
    intr = _synthetic_intrinsics(spec, ex, ey)
    frames, sets = [], []
    for k, patch in enumerate(patches):
        ts = k * spec.frame_interval
        frames.append(FrameRecord(k, ts, Path(DEPTH_DIR) / f"{ts:.6f}.png", _synthetic_pose(spec, patch)))
        x0, y0, px, py = patch
        gx, gy = np.meshgrid(np.arange(x0, x0 + px), np.arange(y0, y0 + py), indexing="ij")
        sets.append(np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size, dtype=np.int64)], axis=1))
    return ScanSequence(tuple(frames), intr), FrameVoxelSets(tuple(sets))


def write_synthetic_scene(spec: SyntheticSceneSpec, root) -> tuple[ScanSequence, FrameVoxelSets]:
    sequence, sets = generate_synthetic_scene(spec)
    depths = [render_synthetic_depth(spec, k) for k in range(len(sequence))]
    return write_sequence(root, sequence, depths), sets
