"""
Recall@k with planted and random descriptors
============================================

Ground truth comes from geometry: a database frame is a correct answer when
it sees more than 30% of the query's voxels.
"""

# %%
import numpy as np

from vprdb import (
    DescriptorSet,
    SyntheticSceneSpec,
    build_inverted_index,
    count_pair_intersections,
    generate_synthetic_scene,
    recall_at_k,
    select_database,
)

spec = SyntheticSceneSpec("corridor", frame_count=15, step=1.5, view_extent=10)
_, sets = generate_synthetic_scene(spec)
table = count_pair_intersections(build_inverted_index(sets))
selection = select_database(table, 0.1, "exact")
db_ids = list(selection.db_ids)
queries = list(range(len(sets)))
print("database:", db_ids)

# %% [markdown]
# Planted descriptors: each query copies the vector of its class frame.

# %%
rng = np.random.default_rng(0)
vectors = rng.normal(size=(len(sets), 64))
planted = vectors[[selection.class_of[q] for q in queries]]
print("planted recall@1:", recall_at_k(db_ids, queries, DescriptorSet(np.arange(len(sets)), planted), 1, table).recall)

# %% [markdown]
# Random descriptors sit near chance, which here depends on how many
# database frames cover each query.

# %%
for k in (1, 2, 3):
    result = recall_at_k(db_ids, queries, DescriptorSet(np.arange(len(sets)), vectors), k, table)
    print(f"random recall@{k}: {result.recall:.3f}")
