"""
Selecting a database from a synthetic corridor
==============================================

A camera slides along a corridor. Each frame sees ten voxels of floor and
consecutive frames share five of them, so their IoU is 1/3.
"""

# %%
import math

from vprdb import (
    SyntheticSceneSpec,
    build_graph,
    build_inverted_index,
    compute_stats,
    count_pair_intersections,
    generate_synthetic_scene,
    select_database,
)

spec = SyntheticSceneSpec("corridor", frame_count=12, step=1.5, view_extent=10)
sequence, sets = generate_synthetic_scene(spec)
print(len(sequence), "frames,", sets.sizes.tolist(), "voxels each")

# %% [markdown]
# The inverted index maps each voxel to the frames that observe it. Pair
# counts follow from it without comparing every pair of frames.

# %%
index = build_inverted_index(sets)
table = count_pair_intersections(index)
print(index.M, "map voxels,", len(table), "overlapping pairs")
print("IoU(0, 1) =", table.iou(0, 1), " IoU(0, 2) =", table.iou(0, 2))

# %% [markdown]
# With a threshold of 0.1 only neighbours are connected: the graph is a path.

# %%
graph = build_graph(table, 0.1)
print(graph.edges.tolist())

# %%
for selector in ("greedy", "exact"):
    selection = select_database(table, 0.1, selector)
    stats = compute_stats(selection, sets, index)
    print(f"{selector:6s} {selection.db_ids}  {stats.summary()}")
print("minimum for a path of", len(sequence), "vertices:", math.ceil(len(sequence) / 3))

# %% [markdown]
# Every frame is assigned to the database frame it overlaps most.

# %%
selection = select_database(table, 0.1, "exact")
print(selection.class_of)
