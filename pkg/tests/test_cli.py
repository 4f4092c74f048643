"""End-to-end exercises of the command line.

Each command runs in a tmp directory through main(argv), so these tests
cover flag parsing, config-file merging, exit codes, and the on-disk
contract between commands (synth output feeds register, register output
feeds evaluate).
"""

import json
from pathlib import Path

import numpy as np
import pytest

from morphreg import (
    GridDesc,
    ScalarImage,
    VectorField,
    load_grid,
    load_pair,
    load_report,
    save_grid,
)
from morphreg.cli import gradient_check, main, write_pgm


def synth(out, *extra) -> int:
    base = [
        "synth", "--out", str(out), "--size", "16", "--shape", "blobs",
        "--amplitude", "0.3", "--seed", "3",
    ]
    return main(base + list(extra))


def register_args(pair_dir, out, *extra):
    return [
        "register",
        "--source", str(Path(pair_dir) / "source.grid"),
        "--target", str(Path(pair_dir) / "target.grid"),
        "--out", str(out),
        "--mode", "plain", "--dist", "ssd", "--dist-weight", "3e5",
        "--max-iters", "60", "--tol-rel", "1e-5",
    ] + list(extra)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-data")
    assert synth(out) == 0
    return out / "pair-000"


@pytest.fixture(scope="module")
def tumor_pair(tmp_path_factory):
    out = tmp_path_factory.mktemp("seg-data")
    assert main([
        "synth", "--out", str(out), "--size", "32", "--shape", "blobs",
        "--amplitude", "0.0", "--seed", "7", "--tumor-radius", "5",
        "--tumor-delta", "0.6", "--tumor-center", "16,16",
    ]) == 0
    return out / "pair-000"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, dataset):
    reg = tmp_path_factory.mktemp("pipeline-reg")
    assert main(register_args(dataset, reg)) in (0, 4)
    return dataset, reg


class TestArgParsing:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--frobnicate", "1"])
        assert exc.value.code == 2

    def test_missing_required_flag_exits_2(self, capsys):
        assert main(["synth"]) == 2
        assert "--out is required" in capsys.readouterr().err


class TestConfigMerge:
    def test_config_file_overrides_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"size": 20, "count": 2, "amplitude": 0.2}))
        out = tmp_path / "data"
        assert main(["synth", "--out", str(out), "--config", str(cfg),
                     "--shape", "blobs"]) == 0
        pairs = sorted(out.iterdir())
        assert [p.name for p in pairs] == ["pair-000", "pair-001"]
        assert load_pair(pairs[0]).grid.sizes == (20, 20)

    def test_flags_override_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"size": 20, "count": 2}))
        out = tmp_path / "data"
        assert main(["synth", "--out", str(out), "--config", str(cfg),
                     "--count", "1", "--size", "24", "--amplitude", "0.2"]) == 0
        pairs = list(out.iterdir())
        assert len(pairs) == 1
        assert load_pair(pairs[0]).grid.sizes == (24, 24)

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"sizes": 20}))
        assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_non_object_config_exits_2(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 2

    def test_missing_config_file_exits_2(self, tmp_path):
        missing = tmp_path / "nope.json"
        assert main(["synth", "--out", str(tmp_path / "d"),
                     "--config", str(missing)]) == 2


class TestSynth:
    def test_writes_complete_pair_directories(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert synth(out, "--count", "2") == 0
        assert "wrote 2 pair(s)" in capsys.readouterr().out
        for name in ("pair-000", "pair-001"):
            files = {p.name for p in (out / name).iterdir()}
            assert {"source.grid", "target.grid", "mask_source.grid",
                    "mask_target.grid", "landmarks_source.csv",
                    "landmarks_target.csv", "truth_v0.grid"} <= files

    def test_deterministic_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert synth(a) == 0 and synth(b) == 0
        for name in ("source.grid", "target.grid", "truth_v0.grid"):
            assert (a / "pair-000" / name).read_bytes() == \
                   (b / "pair-000" / name).read_bytes()

    def test_indices_get_distinct_seeds(self, tmp_path):
        out = tmp_path / "data"
        assert synth(out, "--count", "2") == 0
        first = load_pair(out / "pair-000")
        second = load_pair(out / "pair-001")
        assert not np.array_equal(first.source.data, second.source.data)

    def test_jobs_flag_preserves_outputs(self, tmp_path):
        serial, parallel = tmp_path / "s", tmp_path / "p"
        assert synth(serial, "--count", "2") == 0
        assert synth(parallel, "--count", "2", "--jobs", "2") == 0
        for name in ("pair-000", "pair-001"):
            assert (serial / name / "source.grid").read_bytes() == \
                   (parallel / name / "source.grid").read_bytes()

    def test_tumor_flags_mark_the_target(self, tmp_path):
        out = tmp_path / "data"
        assert main([
            "synth", "--out", str(out), "--size", "32", "--shape", "blobs",
            "--amplitude", "0.0", "--seed", "5", "--tumor-radius", "4",
            "--tumor-delta", "0.5", "--tumor-center", "12,14",
        ]) == 0
        pair = load_pair(out / "pair-000")
        assert pair.mask_target.data.sum() > 0
        assert pair.mask_source.data.sum() == 0

    def test_export_pgm_writes_previews(self, tmp_path):
        out = tmp_path / "data"
        assert synth(out, "--export-pgm") == 0
        pgm = (out / "pair-000" / "source.pgm").read_bytes()
        assert pgm.startswith(b"P5\n16 16\n255\n")
        assert len(pgm) == len(b"P5\n16 16\n255\n") + 16 * 16

    def test_bad_tumor_geometry_exits_2(self, tmp_path):
        # radius must stay under a quarter of the smallest axis
        assert main([
            "synth", "--out", str(tmp_path / "d"), "--size", "16",
            "--tumor-radius", "8",
        ]) == 2


class TestRegister:
    def test_plain_run_writes_artifacts(self, dataset, tmp_path, capsys):
        out = tmp_path / "reg"
        code = main(register_args(dataset, out))
        assert code in (0, 4)
        for name in ("v0.grid", "deformed.grid", "psi.grid", "run.json"):
            assert (out / name).exists()
        run = load_report(out / "run.json")
        assert run["converged"] == (code == 0)
        assert run["iterations"] == len(run["trace"]) - 1
        assert run["trace"] == sorted(run["trace"], reverse=True)
        assert run["jac_det_min"] > 0
        # registration must actually move the image toward the target
        pair = load_pair(dataset)
        deformed = load_grid(out / "deformed.grid")
        before = float(((pair.source.data - pair.target.data) ** 2).sum())
        after = float(((deformed.data - pair.target.data) ** 2).sum())
        assert after < 0.05 * before
        assert "plain" not in capsys.readouterr().err

    def test_iteration_cap_exits_4(self, dataset, tmp_path):
        out = tmp_path / "reg"
        assert main(register_args(dataset, out, "--max-iters", "2",
                                  "--tol-rel", "1e-14")) == 4
        assert load_report(out / "run.json")["converged"] is False

    def test_metamorph_residual_masks_velocity(self, dataset, tmp_path):
        out = tmp_path / "reg"
        code = main(register_args(
            dataset, out, "--mode", "metamorph", "--estimator", "residual",
            "--threshold", "0.1", "--max-iters", "10",
        ))
        assert code in (0, 4)
        union = load_grid(out / "union.grid")
        v0 = load_grid(out / "v0.grid")
        assert (np.abs(v0.data) * union.data[None]).max() == 0.0

    def test_explicit_mask_files_accepted(self, dataset, tmp_path):
        out = tmp_path / "reg"
        code = main(register_args(
            dataset, out, "--mode", "metamorph",
            "--mask-source", str(dataset / "mask_source.grid"),
            "--mask-target", str(dataset / "mask_target.grid"),
            "--max-iters", "5",
        ))
        assert code in (0, 4)
        assert (out / "union.grid").exists()

    def test_oracle_without_masks_exits_2(self, dataset, tmp_path, capsys):
        assert main(register_args(
            dataset, tmp_path / "reg", "--mode", "metamorph",
            "--estimator", "oracle",
        )) == 2
        assert "mask" in capsys.readouterr().err

    def test_missing_source_file_exits_2(self, tmp_path):
        assert main([
            "register", "--source", str(tmp_path / "nope.grid"),
            "--target", str(tmp_path / "nope.grid"), "--out", str(tmp_path / "o"),
        ]) == 2

    def test_vector_source_exits_2(self, dataset, tmp_path):
        assert main(register_args(
            Path(str(dataset)), tmp_path / "reg",
            "--source", str(dataset / "truth_v0.grid"),
        )) == 2


class TestSegment:
    def test_residual_finds_the_lesion(self, tumor_pair, tmp_path, capsys):
        out = tmp_path / "seg"
        assert main([
            "segment", "--source", str(tumor_pair / "source.grid"),
            "--target", str(tumor_pair / "target.grid"), "--out", str(out),
            "--estimator", "residual", "--threshold", "0.3",
        ]) == 0
        assert "masked" in capsys.readouterr().out
        run = load_report(out / "run.json")
        assert run["area_union"] > 0
        assert run["area_source"] == 0.0  # lesion lives in the target
        # smoothing keeps detection inside the lesion plateau, so demand
        # precision, not recall: every flagged voxel is truly lesion
        m_tgt = load_grid(out / "mask_target.grid")
        truth = load_grid(tumor_pair / "mask_target.grid")
        overlap = (m_tgt.data * truth.data).sum()
        assert m_tgt.data.sum() >= 10
        assert overlap / m_tgt.data.sum() > 0.9

    def test_oracle_returns_the_labels(self, tumor_pair, tmp_path):
        out = tmp_path / "seg"
        assert main([
            "segment", "--source", str(tumor_pair / "source.grid"),
            "--target", str(tumor_pair / "target.grid"), "--out", str(out),
            "--estimator", "oracle",
            "--mask-source", str(tumor_pair / "mask_source.grid"),
            "--mask-target", str(tumor_pair / "mask_target.grid"),
        ]) == 0
        assert (out / "mask_target.grid").read_bytes() == \
               (tumor_pair / "mask_target.grid").read_bytes()

    def test_oracle_without_labels_exits_2(self, tumor_pair, tmp_path):
        assert main([
            "segment", "--source", str(tumor_pair / "source.grid"),
            "--target", str(tumor_pair / "target.grid"),
            "--out", str(tmp_path / "seg"), "--estimator", "oracle",
        ]) == 2


class TestShoot:
    def test_reproduces_the_synthetic_target(self, tmp_path, capsys):
        data = tmp_path / "data"
        assert synth(data) == 0
        pair_dir = data / "pair-000"
        out = tmp_path / "shot"
        assert main([
            "shoot", "--v0", str(pair_dir / "truth_v0.grid"),
            "--image", str(pair_dir / "source.grid"), "--out", str(out),
        ]) == 0
        assert "min Jacobian determinant" in capsys.readouterr().out
        # no tumor, no noise: carrying the source along the stored truth
        # velocity must rebuild the target bit for bit
        deformed = load_grid(out / "deformed.grid")
        target = load_grid(pair_dir / "target.grid")
        np.testing.assert_array_equal(deformed.data, target.data)
        run = load_report(out / "run.json")
        assert run["jac_det_min"] > 0
        assert np.isfinite(run["reg_energy"])

    def test_scalar_v0_exits_2(self, tmp_path):
        grid = GridDesc((8, 8))
        save_grid(ScalarImage(grid, np.zeros(grid.sizes)), tmp_path / "s.grid")
        assert main(["shoot", "--v0", str(tmp_path / "s.grid"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_unstable_velocity_exits_3(self, tmp_path, capsys):
        grid = GridDesc((16, 16))
        rng = np.random.default_rng(0)
        wild = VectorField(grid, 1e4 * rng.standard_normal((2,) + grid.sizes))
        save_grid(wild, tmp_path / "v.grid")
        assert main(["shoot", "--v0", str(tmp_path / "v.grid"),
                     "--out", str(tmp_path / "o")]) == 3
        assert "numerical failure" in capsys.readouterr().err


class TestJoint:
    def test_runs_a_small_dataset(self, tmp_path):
        data = tmp_path / "data"
        assert synth(data, "--count", "2") == 0
        out = tmp_path / "joint"
        code = main([
            "joint", "--data", str(data), "--out", str(out), "--q", "2",
            "--dist", "ssd", "--dist-weight", "3e5", "--max-iters", "25",
            "--tol-rel", "1e-5", "--estimator", "residual", "--threshold", "0.9",
        ])
        assert code in (0, 4)
        run = load_report(out / "run.json")
        assert len(run["history"]) == 2
        assert run["failures"] == []
        assert all(np.isfinite(h["mean_total"]) for h in run["history"])
        report = load_report(out / "report.json")
        assert report["aggregate"]["pairs"] == 2
        for name in ("pair-000", "pair-001"):
            files = {p.name for p in (out / name).iterdir()}
            assert {"v0.grid", "deformed.grid", "mask_source.grid",
                    "mask_target.grid", "union.grid"} <= files

    def test_partial_failure_exits_3(self, tmp_path):
        data = tmp_path / "data"
        assert synth(data) == 0
        bare = data / "pair-bare"
        bare.mkdir()
        pair = load_pair(data / "pair-000")
        save_grid(pair.source, bare / "source.grid")
        save_grid(pair.target, bare / "target.grid")
        out = tmp_path / "joint"
        assert main([
            "joint", "--data", str(data), "--out", str(out), "--q", "1",
            "--dist", "ssd", "--dist-weight", "3e5", "--max-iters", "5",
            "--estimator", "oracle",
        ]) == 3
        run = load_report(out / "run.json")
        assert [f["pair"] for f in run["failures"]] == ["pair-bare"]

    def test_empty_data_directory_exits_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["joint", "--data", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 2


class TestEvaluate:
    def test_report_covers_similarity_landmarks_and_map(self, pipeline, tmp_path):
        pair_dir, reg = pipeline
        out = tmp_path / "eval"
        assert main(["evaluate", "--pairs", str(pair_dir),
                     "--results", str(reg), "--out", str(out)]) == 0
        report = load_report(out / "report.json")
        row = report["pairs"][0]
        for key in ("ssd_before", "ssd_after", "rmi_before", "rmi_after",
                    "landmark_l2_before", "landmark_l2_after",
                    "jac_det_min", "iterations", "converged"):
            assert key in row
        assert row["ssd_after"] < row["ssd_before"]
        assert row["landmark_l2_after"] < row["landmark_l2_before"]
        assert report["aggregate"]["pairs"] == 1
        assert "timestamp" in report

    def test_stdout_when_no_out_given(self, pipeline, capsys):
        pair_dir, reg = pipeline
        assert main(["evaluate", "--pairs", str(pair_dir),
                     "--results", str(reg)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["aggregate"]["pairs"] == 1

    def test_missing_results_exit_2(self, tmp_path):
        data_root = tmp_path / "data"
        assert synth(data_root, "--count", "2") == 0
        assert main(["evaluate", "--pairs", str(data_root),
                     "--results", str(tmp_path / "nowhere")]) == 2


class TestGradcheck:
    def test_passes_at_documented_tolerance(self, capsys):
        assert main([
            "gradcheck", "--seeds", "1", "--samples", "8",
            "--dist", "ssd", "--masked", "both",
        ]) == 0
        out = capsys.readouterr().out
        assert "gradient check passed" in out
        assert "FAIL" not in out

    def test_unreachable_tolerance_exits_3(self, capsys):
        assert main([
            "gradcheck", "--seeds", "1", "--samples", "4",
            "--dist", "ssd", "--masked", "none", "--tol", "1e-15",
        ]) == 3
        assert "FAILED" in capsys.readouterr().out

    def test_rows_cover_requested_cases(self):
        rows = gradient_check(seeds=(0,), dists=("ssd",),
                              masked=(False, True), samples=4)
        assert [(r["dist"], r["masked"]) for r in rows] == \
               [("ssd", "none"), ("ssd", "random")]
        assert all(r["max_rel"] <= 1e-3 for r in rows)


class TestWritePgm:
    def test_three_d_exports_middle_slice(self, tmp_path):
        grid = GridDesc((4, 5, 6))
        data = np.zeros(grid.sizes)
        data[0] = 999.0  # must not leak into the preview scaling
        data[2] = np.linspace(0.0, 1.0, 30).reshape(5, 6)
        write_pgm(ScalarImage(grid, data), tmp_path / "m.pgm")
        raw = (tmp_path / "m.pgm").read_bytes()
        assert raw.startswith(b"P5\n6 5\n255\n")
        body = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8)
        # scaled from the middle slice alone: full 0..255 range
        assert body.min() == 0 and body.max() == 255

    def test_constant_image_maps_to_zero(self, tmp_path):
        grid = GridDesc((4, 4))
        write_pgm(ScalarImage(grid, np.full(grid.sizes, 0.5)), tmp_path / "c.pgm")
        raw = (tmp_path / "c.pgm").read_bytes()
        body = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8)
        assert body.max() == 0
