import numpy as np
import pytest

from conftest import random_voxel_sets
from vprdb import (
    DatabaseSelection,
    DescriptorSet,
    InputError,
    PairOverlapTable,
    SyntheticSceneSpec,
    build_inverted_index,
    compute_stats,
    count_pair_intersections,
    export_finetune_split,
    generate_synthetic_scene,
    ground_truth_match,
    load_descriptors,
    recall_at_k,
    save_descriptors,
    select_database,
)
from vprdb.metrics import DatabaseStats, format_reduction, reduction_rate


def selection(db_ids, threshold=0.3):
    return DatabaseSelection(tuple(db_ids), {}, threshold, "greedy")


class TestStats:
    def test_reduction_label(self):
        assert format_reduction(reduction_rate(4800, 5)) == "x960"

    def test_all_frames_full_coverage(self, rng):
        sets = random_voxel_sets(rng, 20, 100)
        stats = compute_stats(selection(range(20)), sets, build_inverted_index(sets))
        assert stats.spatial_coverage == 100.0
        assert stats.reduction_rate == 1.0

    def test_disjoint_corridor_every_frame(self):
        spec = SyntheticSceneSpec("corridor", frame_count=6, step=3.0, view_extent=10)
        sets = generate_synthetic_scene(spec)[1]
        index = build_inverted_index(sets)
        table = count_pair_intersections(index)
        sel = select_database(table, 0.1)
        stats = compute_stats(sel, sets, index)
        assert sel.db_ids == tuple(range(6))
        assert stats.spatial_coverage == 100.0 and stats.reduction_label == "x1"

    def test_partial_coverage_counts_union(self):
        spec = SyntheticSceneSpec("corridor", frame_count=3, step=1.5, view_extent=10)
        sets = generate_synthetic_scene(spec)[1]
        # frame 1 covers voxels 5..14 of 0..19
        stats = compute_stats(selection([1]), sets, build_inverted_index(sets))
        assert stats.spatial_coverage == 50.0
        assert stats.db_size == 1 and stats.sequence_size == 3

    def test_subset_coverage_bounded(self, rng):
        sets = random_voxel_sets(rng, 30, 200)
        index = build_inverted_index(sets)
        for _ in range(20):
            db = rng.choice(30, size=int(rng.integers(1, 30)), replace=False)
            assert 0 < compute_stats(selection(db), sets, index).spatial_coverage <= 100.0

    def test_excluded_frames_reported(self):
        from vprdb import FrameVoxelSets

        sets = FrameVoxelSets.from_iterables([[(0, 0, 0)], [], [(0, 0, 0), (1, 0, 0)]])
        stats = compute_stats(selection([2]), sets, build_inverted_index(sets))
        assert stats.excluded_frames == 1
        assert stats.to_json_dict()["excluded_frames"] == 1

    def test_invalid_db_size(self):
        with pytest.raises(Exception):
            DatabaseStats(3, 0, 0.0, 10.0)


class TestGroundTruthMatch:
    def test_no_intersection(self):
        table = PairOverlapTable.from_dict({}, [4, 4])
        assert not ground_truth_match(0, 1, table)

    def test_containment(self):
        table = PairOverlapTable.from_dict({(0, 1): 4}, [4, 9])
        assert ground_truth_match(0, 1, table, gt_threshold=0.99)

    def test_strict_boundary(self):
        table = PairOverlapTable.from_dict({(0, 1): 3}, [10, 3])
        assert not ground_truth_match(0, 1, table, 0.3)
        # the other direction covers the whole query
        assert ground_truth_match(1, 0, table, 0.3)

    def test_monotone_in_intersection(self):
        results = [
            ground_truth_match(0, 1, PairOverlapTable.from_dict({(0, 1): c} if c else {}, [10, 10]))
            for c in range(11)
        ]
        assert results == sorted(results)


def planted_problem(n_db, n_q):
    """Each query copies the voxels of db frame ``q % n_db``; db frames are disjoint."""
    pairs = {(q % n_db, n_db + q): 10 for q in range(n_q)}
    table = PairOverlapTable.from_dict(pairs, [10] * (n_db + n_q))
    return table, list(range(n_db)), list(range(n_db, n_db + n_q))


class TestRecall:
    def test_planted_descriptors(self, rng):
        table, db, queries = planted_problem(8, 40)
        vec = rng.normal(size=(8, 32))
        mapping = {d: vec[d] for d in db}
        mapping.update({q: vec[(q - 8) % 8] for q in queries})
        res = recall_at_k(db, queries, DescriptorSet.from_mapping(mapping), 1, table)
        assert res.recall == 1.0 and res.evaluated == 40

    def test_exhaustive_k(self, rng):
        table, db, queries = planted_problem(6, 30)
        desc = DescriptorSet(np.arange(36), rng.normal(size=(36, 8)))
        assert recall_at_k(db, queries, desc, 6, table).recall == 1.0

    def test_non_decreasing_in_k(self, rng):
        table, db, queries = planted_problem(10, 200)
        desc = DescriptorSet(np.arange(210), rng.normal(size=(210, 8)))
        recalls = [recall_at_k(db, queries, desc, k, table).recall for k in range(1, 11)]
        assert recalls == sorted(recalls) and recalls[-1] == 1.0

    def test_queries_without_ground_truth_excluded(self, rng):
        sizes = [5, 5, 5, 5]
        table = PairOverlapTable.from_dict({(0, 2): 5}, sizes)  # query 3 overlaps nothing
        desc = DescriptorSet(np.arange(4), np.eye(4))
        res = recall_at_k([0, 1], [2, 3], desc, 2, table)
        assert res.queries_without_gt == (3,)
        assert res.evaluated == 1 and res.recall == 1.0

    def test_ranking_and_ties(self):
        table = PairOverlapTable.from_dict({(1, 3): 5}, [5, 5, 5, 5])
        desc = DescriptorSet.from_mapping({0: [1, 0], 1: [1, 0], 2: [0, 1], 3: [2, 0]})
        res = recall_at_k([0, 1, 2], [3], desc, 1, table)
        assert res.ranked[3] == [0]  # tie between 0 and 1 resolved to the smaller id
        assert res.correct[3] == [False] and res.recall == 0.0
        res2 = recall_at_k([0, 1, 2], [3], desc, 2, table)
        assert res2.ranked[3] == [0, 1] and res2.recall == 1.0
        assert res2.similarity[3] == pytest.approx([1.0, 1.0])

    def test_missing_descriptor(self, rng):
        table, db, queries = planted_problem(3, 3)
        desc = DescriptorSet(np.arange(5), rng.normal(size=(5, 4)))
        with pytest.raises(InputError, match="frame 5"):
            recall_at_k(db, queries, desc, 1, table)

    def test_no_queries(self, rng):
        table, db, _ = planted_problem(3, 3)
        with pytest.raises(InputError, match="no queries"):
            recall_at_k(db, [], DescriptorSet(np.arange(6), np.ones((6, 2))), 1, table)

    def test_report_csv(self, rng, tmp_path):
        table, db, queries = planted_problem(4, 4)
        desc = DescriptorSet(np.arange(8), rng.normal(size=(8, 4)))
        res = recall_at_k(db, queries, desc, 2, table)
        res.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "query_id,rank,db_id,similarity,correct"
        assert len(lines) == 1 + 4 * 2


class TestFinetuneSplit:
    @pytest.mark.parametrize("n,val_ids", [(10, [0, 5]), (4, [0]), (11, [0, 5, 10])])
    def test_every_fifth_frame(self, n, val_ids):
        seq, _ = generate_synthetic_scene(SyntheticSceneSpec("corridor", frame_count=n, step=1.5))
        class_of = {i: i - i % 3 for i in range(n)}
        train, val = export_finetune_split(class_of, seq)
        assert [int(line.split(",")[0]) for line in val] == val_ids
        assert len(train) + len(val) == n
        assert sorted(int(line.split(",")[0]) for line in train + val) == list(range(n))
        overall = sorted(class_of.values())
        assert sorted(int(line.split(",")[1]) for line in train + val) == overall


class TestDescriptorFile:
    def test_parse_line(self, tmp_path):
        (tmp_path / "d.txt").write_text("# id v...\n7 0.1 0.2 0.3\n")
        desc = load_descriptors(tmp_path / "d.txt")
        assert desc.ids.tolist() == [7]
        assert desc.vectors.tolist() == [[0.1, 0.2, 0.3]]

    def test_ragged(self, tmp_path):
        (tmp_path / "d.txt").write_text("1 0.1 0.2\n2 0.3\n")
        with pytest.raises(InputError, match="dimension"):
            load_descriptors(tmp_path / "d.txt")

    @pytest.mark.parametrize("text", ["1 nan 0.2\n", "1 0.1\n1 0.2\n", "x 0.1\n", "1\n"])
    def test_bad_files(self, tmp_path, text):
        (tmp_path / "d.txt").write_text(text)
        with pytest.raises(InputError):
            load_descriptors(tmp_path / "d.txt")

    def test_round_trip(self, rng, tmp_path):
        desc = DescriptorSet(rng.permutation(50), rng.normal(size=(50, 24)) * 10.0 ** rng.integers(-5, 5, size=(50, 1)))
        save_descriptors(tmp_path / "d.txt", desc)
        back = load_descriptors(tmp_path / "d.txt")
        np.testing.assert_array_equal(back.ids, desc.ids)
        np.testing.assert_array_equal(back.vectors, desc.vectors)
