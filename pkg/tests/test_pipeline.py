import json
import logging
import math

import numpy as np
import pytest

from vprdb import ConfigError, DescriptorSet, InputError, SyntheticSceneSpec, save_descriptors, write_synthetic_scene
from vprdb.cli import main
from vprdb.pipeline import PipelineConfig, load_config, read_database_manifest, run_build, run_eval, run_sweep


def corridor(n, step_cells=5, extent=10):
    return SyntheticSceneSpec("corridor", frame_count=n, step=0.3 * step_cells, view_extent=extent)


@pytest.fixture
def corridor_root(tmp_path):
    root = tmp_path / "scan"
    write_synthetic_scene(corridor(5), root)
    return root


def output_bytes(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


class TestBuild:
    @pytest.mark.parametrize("n", [4, 9, 13])
    def test_corridor_from_disk(self, tmp_path, n):
        root = tmp_path / "scan"
        write_synthetic_scene(corridor(n), root)
        cfg = PipelineConfig(input_root=root, threshold=0.1, selector="exact", out=tmp_path / "out")
        result = run_build(cfg)
        assert len(result.selection.db_ids) == math.ceil(n / 3)
        assert read_database_manifest(tmp_path / "out" / "database.txt") == list(result.selection.db_ids)
        stats = json.loads((tmp_path / "out" / "stats.json").read_text())
        assert stats["sequence_size"] == n and stats["db_size"] == math.ceil(n / 3)

    def test_outputs_and_class_file(self, tmp_path, corridor_root):
        out = tmp_path / "out"
        run_build(PipelineConfig(input_root=corridor_root, threshold=0.1, selector="exact", out=out, write_overlap=True))
        assert sorted(p.name for p in out.iterdir()) == [
            "classes.csv", "database.txt", "overlap.csv", "stats.json", "train.csv", "val.csv",
        ]
        assert (out / "database.txt").read_text() == "0\n3\n"
        rows = (out / "classes.csv").read_text().splitlines()
        assert rows[0] == "frame_id,class_db_id,iou"
        assert [r.split(",")[:2] for r in rows[1:]] == [["0", "0"], ["1", "0"], ["2", "3"], ["3", "3"], ["4", "3"]]
        assert (out / "val.csv").read_text().splitlines()[1:] == ["0,0,"]

    def test_repeat_runs_identical(self, tmp_path, corridor_root):
        for name in ("a", "b"):
            run_build(PipelineConfig(input_root=corridor_root, threshold=0.1, out=tmp_path / name, write_overlap=True))
        assert output_bytes(tmp_path / "a") == output_bytes(tmp_path / "b")

    def test_workers_do_not_change_output(self, tmp_path):
        spec = SyntheticSceneSpec("grid-room", frame_count=30, step=0.6, view_extent=5, seed=4)
        for name, workers in (("a", 1), ("b", 3)):
            run_build(PipelineConfig(synthetic=spec, workers=workers, out=tmp_path / name, write_overlap=True))
        assert output_bytes(tmp_path / "a") == output_bytes(tmp_path / "b")

    def test_extend_depth_keeps_full_frames(self, tmp_path, corridor_root):
        plain = run_build(PipelineConfig(input_root=corridor_root, threshold=0.1, out=tmp_path / "a"))
        extended = run_build(PipelineConfig(input_root=corridor_root, threshold=0.1, out=tmp_path / "b", extend_depth=True))
        # every pixel already has depth, so the rendered map changes nothing
        assert all(np.array_equal(a, b) for a, b in zip(plain.sets.sets, extended.sets.sets))

    def test_no_input(self, tmp_path):
        with pytest.raises(ConfigError):
            run_build(PipelineConfig(out=tmp_path))


class TestSweep:
    def test_exact_sizes_non_decreasing(self, tmp_path):
        spec = SyntheticSceneSpec("grid-room", frame_count=16, step=0.6, view_extent=5, seed=1)
        rows = run_sweep(PipelineConfig(synthetic=spec, selector="exact", out=tmp_path), (0.1, 0.3, 0.5, 0.7))
        sizes = [r.db_size for r in rows]
        assert sizes == sorted(sizes)
        assert len(json.loads((tmp_path / "sweep.json").read_text())) == 4
        assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 5

    def test_single_threshold_matches_build(self, tmp_path, corridor_root):
        cfg = PipelineConfig(input_root=corridor_root, threshold=0.3, out=tmp_path / "b")
        (row,) = run_sweep(cfg.replace(out=tmp_path / "s"), [0.3])
        assert row == run_build(cfg).stats

    def test_duplicates_warned(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            rows = run_sweep(PipelineConfig(synthetic=corridor(6), out=tmp_path), [0.1, 0.1, 0.5])
        assert [r.threshold for r in rows] == [0.1, 0.5]
        assert "duplicate threshold" in caplog.text

    def test_invalid_threshold(self, tmp_path):
        with pytest.raises(ConfigError):
            run_sweep(PipelineConfig(synthetic=corridor(6), out=tmp_path), [0.1, 1.2])


def write_descriptors(path, mapping):
    save_descriptors(path, DescriptorSet.from_mapping(mapping))


class TestEval:
    def build(self, tmp_path, root):
        cfg = PipelineConfig(input_root=root, threshold=0.1, selector="exact", out=tmp_path / "out")
        run_build(cfg)
        return cfg

    def test_hand_computed_recall(self, tmp_path, corridor_root):
        # database (0, 3); query q is covered by db 0 for q <= 1 and by db 3 for q >= 2
        cfg = self.build(tmp_path, corridor_root)
        write_descriptors(tmp_path / "db.txt", {0: [1, 0], 3: [0, 1]})
        write_descriptors(tmp_path / "q.txt", {0: [1, 0], 1: [0, 1], 2: [1, 0.1], 3: [0, 1], 4: [1, 1]})
        cfg = cfg.replace(db_descriptors=tmp_path / "db.txt", query_descriptors=tmp_path / "q.txt")
        assert run_eval(cfg).recall == pytest.approx(2 / 5)
        assert run_eval(cfg.replace(k=2)).recall == 1.0
        report = (tmp_path / "out" / "retrieval.csv").read_text().splitlines()
        assert report[1].startswith("0,1,0,")
        summary = json.loads((tmp_path / "out" / "recall.json").read_text())
        assert summary["evaluated_queries"] == 5 and summary["k"] == 2

    def test_self_retrieval(self, tmp_path):
        root = tmp_path / "scan"
        write_synthetic_scene(corridor(12), root)
        cfg = self.build(tmp_path, root)
        db_ids = read_database_manifest(cfg.out / "database.txt")
        classes = dict(
            tuple(map(int, line.split(",")[:2]))
            for line in (cfg.out / "classes.csv").read_text().splitlines()[1:]
        )
        vec = np.random.default_rng(0).normal(size=(12, 16))
        write_descriptors(tmp_path / "db.txt", {d: vec[d] for d in db_ids})
        write_descriptors(tmp_path / "q.txt", {q: vec[classes[q]] for q in range(12)})
        cfg = cfg.replace(db_descriptors=tmp_path / "db.txt", query_descriptors=tmp_path / "q.txt")
        result = run_eval(cfg)
        assert result.recall == 1.0 and result.evaluated == 12

    def test_empty_query_sequence(self, tmp_path, corridor_root):
        cfg = self.build(tmp_path, corridor_root)
        queries = tmp_path / "queries"
        write_synthetic_scene(corridor(2), queries)
        (queries / "trajectory.txt").write_text("")
        write_descriptors(tmp_path / "d.txt", {i: [1.0, 0.0] for i in range(5)})
        cfg = cfg.replace(db_descriptors=tmp_path / "d.txt", query_descriptors=tmp_path / "d.txt", query_root=queries)
        with pytest.raises(InputError, match="no queries"):
            run_eval(cfg)

    def test_missing_descriptor_is_fatal(self, tmp_path, corridor_root):
        cfg = self.build(tmp_path, corridor_root)
        write_descriptors(tmp_path / "db.txt", {0: [1, 0], 3: [0, 1]})
        write_descriptors(tmp_path / "q.txt", {i: [1, 0] for i in range(4)})
        cfg = cfg.replace(db_descriptors=tmp_path / "db.txt", query_descriptors=tmp_path / "q.txt")
        with pytest.raises(InputError, match="frame 4"):
            run_eval(cfg)


class TestConfig:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# database build\nthreshold = 0.5\nselector = exact\nwrite_overlap = yes\n"
            "synthetic.kind = grid-room\nsynthetic.frame_count = 12\nsynthetic.step = 0.6\n"
        )
        cfg = load_config(path, threshold=0.2, stride=None)
        assert cfg.threshold == 0.2 and cfg.selector == "exact" and cfg.write_overlap
        assert cfg.synthetic.kind == "grid-room" and cfg.synthetic.frame_count == 12
        assert cfg.stride == 4

    @pytest.mark.parametrize("text", ["bogus = 1\n", "threshold 0.3\n", "stride = four\n", "synthetic.colour = red\n"])
    def test_bad_files(self, tmp_path, text):
        (tmp_path / "run.cfg").write_text(text)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "run.cfg")

    @pytest.mark.parametrize("field,value", [("threshold", 0.0), ("threshold", 1.0), ("stride", 0), ("voxel_size", -1.0)])
    def test_out_of_range(self, field, value):
        with pytest.raises(ConfigError):
            PipelineConfig(**{field: value})


class TestCli:
    def test_synth_build_sweep(self, tmp_path, capsys):
        scan, out = tmp_path / "scan", tmp_path / "out"
        assert main(["synth", "--frames", "7", "--out", str(scan)]) == 0
        code = main(["build", "--input", str(scan), "--threshold", "0.1", "--selector", "exact", "--out", str(out)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "mu=0.1 sequence 7: database 3, x2, coverage 75%"
        assert main(["sweep", "--input", str(scan), "--thresholds", "0.1,0.5", "--out", str(out)]) == 0
        assert len(capsys.readouterr().out.strip().splitlines()) == 2

    def test_eval(self, tmp_path, corridor_root, capsys):
        out = tmp_path / "out"
        assert main(["build", "--input", str(corridor_root), "--threshold", "0.1", "--selector", "exact", "--out", str(out)]) == 0
        write_descriptors(tmp_path / "db.txt", {0: [1, 0], 3: [0, 1]})
        write_descriptors(tmp_path / "q.txt", {0: [1, 0], 1: [1, 0], 2: [0, 1], 3: [0, 1], 4: [0, 1]})
        argv = ["eval", "--input", str(corridor_root), "--out", str(out),
                "--db-descriptors", str(tmp_path / "db.txt"), "--query-descriptors", str(tmp_path / "q.txt")]
        assert main(argv) == 0
        assert capsys.readouterr().out.splitlines()[-1].startswith("recall@1 = 1.0000")

    def test_config_error_exit_code(self, tmp_path, corridor_root, capsys):
        assert main(["build", "--input", str(corridor_root), "--threshold", "1.5", "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:") and len(err.strip().splitlines()) == 1

    def test_input_error_exit_code(self, tmp_path, capsys):
        assert main(["build", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_eval_without_database(self, tmp_path, corridor_root):
        write_descriptors(tmp_path / "d.txt", {0: [1.0]})
        argv = ["eval", "--input", str(corridor_root), "--out", str(tmp_path / "none"),
                "--db-descriptors", str(tmp_path / "d.txt"), "--query-descriptors", str(tmp_path / "d.txt")]
        assert main(argv) == 2

    def test_unknown_selector_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(["build", "--selector", "random"])


class TestFrameRange:
    def test_slice_renumbers_frames(self, tmp_path):
        root = tmp_path / "scan"
        write_synthetic_scene(corridor(12), root)
        result = run_build(PipelineConfig(input_root=root, threshold=0.1, selector="exact",
                                          frame_range="3:9", out=tmp_path / "out"))
        assert result.stats.sequence_size == 6
        assert [f.id for f in result.sequence] == list(range(6))
        assert result.sequence[0].timestamp == pytest.approx(0.3)
        assert len(result.selection.db_ids) == 2

    def test_synthetic_slice_matches_disk(self, tmp_path):
        root = tmp_path / "scan"
        write_synthetic_scene(corridor(12), root)
        a = run_build(PipelineConfig(input_root=root, frame_range="5:", out=tmp_path / "a"))
        b = run_build(PipelineConfig(synthetic=corridor(12), frame_range="5:", out=tmp_path / "b"))
        assert a.selection.db_ids == b.selection.db_ids
        assert all(np.array_equal(x, y) for x, y in zip(a.sets.sets, b.sets.sets))

    @pytest.mark.parametrize("text", ["7", "5:5", "-1:3", "a:b"])
    def test_bad_range(self, text):
        with pytest.raises(ConfigError):
            PipelineConfig(frame_range=text)

    def test_range_past_end(self, tmp_path, corridor_root):
        with pytest.raises(InputError, match="no frames"):
            run_build(PipelineConfig(input_root=corridor_root, frame_range="10:20", out=tmp_path))

    def test_cli_flag(self, tmp_path, corridor_root, capsys):
        argv = ["build", "--input", str(corridor_root), "--frame-range", "0:3", "--threshold", "0.1", "--out", str(tmp_path)]
        assert main(argv) == 0
        assert "sequence 3:" in capsys.readouterr().out
