"""Compact visual place recognition databases from RGBD scanning sequences.

Frames are voxelized, pairwise voxel overlap is counted through an
inverted index, and a dominating set of the thresholded overlap graph is
selected as the database. The remaining frames are labelled with their
database class, and retrieval can be scored against spatial ground truth.
"""

from .errors import (
    ConfigError,
    DegenerateFrameError,
    InputError,
    InternalConsistencyError,
    InvalidDepthError,
    PipelineError,
    ShapeError,
    VprdbError,
)
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PoseSE3,
    backproject_pixel,
    frame_to_world_points,
    project_points,
    synthesize_depth_from_map,
    voxelize,
)
from .metrics import (
    DatabaseStats,
    DescriptorSet,
    RetrievalResult,
    compute_stats,
    export_finetune_split,
    ground_truth_match,
    load_descriptors,
    recall_at_k,
    save_descriptors,
)
from .overlap import (
    FrameVoxelSets,
    InvertedVoxelIndex,
    PairOverlapTable,
    build_inverted_index,
    count_pair_intersections,
    coverage_overlap,
    iou_overlap,
    naive_pairwise,
)
from .pipeline import PipelineConfig, load_config, run_build, run_eval, run_sweep
from .selection import (
    DatabaseSelection,
    OverlapGraph,
    assign_classes,
    build_graph,
    coverage_loss,
    exact_dominating_set,
    greedy_dominating_set,
    select_database,
)
from .sequence_io import (
    FrameRecord,
    ScanSequence,
    SyntheticSceneSpec,
    associate_streams,
    generate_synthetic_scene,
    load_sequence,
    write_synthetic_scene,
)

__version__ = "0.1.0"
