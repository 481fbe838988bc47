"""CLI surface: flags, exit codes, determinism of produced artifacts."""

import os

import numpy as np
import pytest

from stn_align import imageio
from stn_align import landmarks as lmk
from stn_align import transforms as tf
from stn_align.cli import EXIT_FAILURE, EXIT_IO, EXIT_OK, EXIT_USAGE, main


def run_cli(*argv):
    return main(list(argv))


class TestGradcheckCommand:
    def test_transforms_suite_passes(self, capsys):
        assert run_cli("gradcheck", "--module", "transforms", "--trials", "25") == EXIT_OK
        out = capsys.readouterr().out
        assert "transform-jacobian/similarity" in out
        assert "resolved configuration" in out

    def test_impossible_tolerance_fails(self):
        assert run_cli("gradcheck", "--module", "transforms", "--trials", "3",
                       "--tolerance", "0") == EXIT_FAILURE

    def test_zero_trials_vacuous_pass_with_warning(self, capsys):
        assert run_cli("gradcheck", "--module", "transforms", "--trials", "0") == EXIT_OK
        assert "vacuous" in capsys.readouterr().out

    def test_unknown_module_rejected_as_usage_error(self):
        assert run_cli("gradcheck", "--module", "nonsense") == EXIT_USAGE


class TestGenData:
    def test_deterministic_manifest(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        args = ["gen-data", "--seed", "7", "--identities", "5", "--observations", "4",
                "--image-size", "24", "--pairs", "20"]
        assert run_cli(*args, "--out", str(a)) == EXIT_OK
        assert run_cli(*args, "--out", str(b)) == EXIT_OK
        assert (a / "manifest.txt").read_bytes() == (b / "manifest.txt").read_bytes()
        assert (a / "pairs.txt").read_bytes() == (b / "pairs.txt").read_bytes()
        img = sorted(os.listdir(a / "images"))[0]
        assert (a / "images" / img).read_bytes() == (b / "images" / img).read_bytes()

    def test_unknown_flag_rejected(self):
        assert run_cli("gen-data", "--out", "/tmp/x", "--bogus-flag") == EXIT_USAGE


class TestTrainEval:
    def test_zero_iters_writes_valid_checkpoint(self, tmp_path):
        out = tmp_path / "run"
        code = run_cli("train", "--out", str(out), "--seed", "3",
                       "--identities", "5", "--observations", "4",
                       "--pairs", "20",
                       "--max-iters", "0", "--batch-size", "10")
        assert code == EXIT_OK
        from stn_align.checkpoint import load_checkpoint
        state = load_checkpoint(out / "checkpoint.ckpt")
        assert state.spec.transform_kind == "similarity"
        assert (out / "metrics.txt").exists()
        assert (out / "config.txt").exists()
        assert (out / "manifest.txt").exists()

    def test_train_then_eval(self, tmp_path):
        out = tmp_path / "run"
        common = ["--seed", "3", "--identities", "6", "--observations", "6",
                  "--pairs", "20"]
        assert run_cli("train", "--out", str(out), *common,
                       "--max-iters", "4", "--batch-size", "10",
                       "--log-every", "1") == EXIT_OK
        assert run_cli("eval", "--checkpoint", str(out / "checkpoint.ckpt"),
                       *common, "--pca-dim", "8",
                       "--out", str(tmp_path / "eval")) == EXIT_OK
        report = (tmp_path / "eval" / "report.txt").read_text()
        assert report.startswith("accuracy ")

    def test_short_train_deterministic(self, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run_cli("train", "--out", str(out), "--seed", "5",
                           "--identities", "5", "--observations", "4",
                           "--pairs", "20",
                           "--max-iters", "3", "--batch-size", "8",
                           "--deterministic") == EXIT_OK
            outs.append(out)
        assert (outs[0] / "checkpoint.ckpt").read_bytes() == \
            (outs[1] / "checkpoint.ckpt").read_bytes()
        assert (outs[0] / "metrics.txt").read_bytes() == \
            (outs[1] / "metrics.txt").read_bytes()

    def test_missing_dataset_dir_is_io_error(self, tmp_path):
        assert run_cli("train", "--out", str(tmp_path / "x"),
                       "--data", str(tmp_path / "nope"),
                       "--max-iters", "0") == EXIT_IO


class TestCompareKinds:
    def test_default_kinds_give_four_rows(self, tmp_path):
        out = tmp_path / "cmp"
        assert run_cli("compare-kinds", "--out", str(out), "--seed", "2",
                       "--identities", "5", "--observations", "4",
                       "--pairs", "20", "--max-iters", "2",
                       "--batch-size", "8", "--train-seeds", "1",
                       "--reinit-at", "0") == EXIT_OK
        rows = [l for l in (out / "kinds_table.txt").read_text().splitlines()
                if l and not l.startswith("#")]
        assert len(rows) == 4
        assert [r.split()[0] for r in rows] == ["identity", "similarity",
                                                "affine", "projective"]

    def test_sweep_locnet_writes_table(self, tmp_path):
        out = tmp_path / "sweep"
        assert run_cli("sweep-locnet", "--out", str(out), "--seed", "2",
                       "--kind", "affine", "--identities", "5",
                       "--observations", "4", "--pairs", "10",
                       "--iters", "3") == EXIT_OK
        rows = [l for l in (out / "locnet_table.txt").read_text().splitlines()
                if l and not l.startswith("#")]
        assert len(rows) == 6
        for row in rows:
            name, count, mse = row.split()
            int(count), float(mse)


class TestWarp:
    def test_identity_params_reproduce_pgm_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        src = tmp_path / "in.pgm"
        imageio.write_pgm(src, rng.random((9, 9)))
        params = tmp_path / "p.txt"
        params.write_text(tf.to_record(tf.IdentityParams()))
        out = tmp_path / "out.pgm"
        assert run_cli("warp", "--input", str(src), "--params", str(params),
                       "--output", str(out)) == EXIT_OK
        assert out.read_bytes() == src.read_bytes()

    def test_forward_then_inverse_small_interior_error(self, tmp_path):
        # smooth band-limited test image
        ys, xs = np.meshgrid(np.linspace(0, 1, 48), np.linspace(0, 1, 48),
                             indexing="ij")
        img = 0.5 + 0.25 * np.sin(2 * np.pi * xs) * np.cos(2 * np.pi * ys)
        src = tmp_path / "s.pgm"
        imageio.write_pgm(src, img)
        params = tf.SimilarityParams(0.3, 1.1, 0.05, -0.04)
        (tmp_path / "f.txt").write_text(tf.to_record(params))
        (tmp_path / "b.txt").write_text(tf.to_record(tf.invert(params)))
        mid = tmp_path / "mid.pgm"
        out = tmp_path / "back.pgm"
        assert run_cli("warp", "--input", str(src), "--params",
                       str(tmp_path / "f.txt"), "--output", str(mid)) == EXIT_OK
        assert run_cli("warp", "--input", str(mid), "--params",
                       str(tmp_path / "b.txt"), "--output", str(out)) == EXIT_OK
        original = imageio.read_pgm(src)
        restored = imageio.read_pgm(out)
        interior = (slice(10, -10), slice(10, -10))
        assert np.abs(original[interior] - restored[interior]).max() < 0.02

    def test_checkpoint_prediction_writes_params(self, tmp_path):
        out_dir = tmp_path / "run"
        assert run_cli("train", "--out", str(out_dir), "--seed", "2",
                       "--identities", "5", "--observations", "4",
                       "--pairs", "20",
                       "--max-iters", "0", "--batch-size", "10") == EXIT_OK
        src = tmp_path / "in.pgm"
        imageio.write_pgm(src, np.random.default_rng(1).random((40, 40)))
        out = tmp_path / "warped.pgm"
        assert run_cli("warp", "--input", str(src),
                       "--checkpoint", str(out_dir / "checkpoint.ckpt"),
                       "--output", str(out)) == EXIT_OK
        predicted = tf.parse_record((tmp_path / "warped.pgm.params").read_text())
        # identity-initialized localization net predicts the exact identity
        assert predicted == tf.identity_params("similarity")

    def test_unreadable_input_is_io_error(self, tmp_path):
        params = tmp_path / "p.txt"
        params.write_text(tf.to_record(tf.IdentityParams()))
        assert run_cli("warp", "--input", str(tmp_path / "missing.pgm"),
                       "--params", str(params),
                       "--output", str(tmp_path / "o.pgm")) == EXIT_IO

    def test_degenerate_params_fail(self, tmp_path):
        src = tmp_path / "in.pgm"
        imageio.write_pgm(src, np.zeros((8, 8)))
        params = tmp_path / "p.txt"
        params.write_text(tf.to_record(tf.ProjectiveParams(1, 0, 0, 0, 1, 0, 1.0, 0)))
        assert run_cli("warp", "--input", str(src), "--params", str(params),
                       "--output", str(tmp_path / "o.pgm")) == EXIT_FAILURE


class TestRelocateCommand:
    def test_translation_shift(self, tmp_path):
        pts = {"img0": np.array([[0.0, 0.0], [0.25, 0.5]])}
        src = tmp_path / "pts.csv"
        lmk.write_landmarks(src, pts, lmk.FRAME_ALIGNED)
        params = tmp_path / "p.txt"
        params.write_text(tf.to_record(tf.SimilarityParams(0.0, 1.0, 0.5, 0.0)))
        out = tmp_path / "out.csv"
        assert run_cli("relocate", "--points", str(src), "--params", str(params),
                       "--output", str(out)) == EXIT_OK
        loaded, frame = lmk.read_landmarks(out)
        assert frame == lmk.FRAME_ORIGINAL
        np.testing.assert_allclose(loaded["img0"][:, 0], [0.5, 0.75])

    def test_wrong_frame_rejected(self, tmp_path):
        src = tmp_path / "pts.csv"
        lmk.write_landmarks(src, {"a": np.zeros((1, 2))}, lmk.FRAME_ORIGINAL)
        params = tmp_path / "p.txt"
        params.write_text(tf.to_record(tf.IdentityParams()))
        assert run_cli("relocate", "--points", str(src), "--params", str(params),
                       "--output", str(tmp_path / "o.csv")) == EXIT_USAGE


class TestMisc:
    def test_info_prints_defaults(self, capsys):
        assert run_cli("info") == EXIT_OK
        out = capsys.readouterr().out
        assert "batch_size=100" in out
        assert "STNCKPT1" in out

    def test_help_exits_zero(self):
        assert run_cli("--help") == 0

    def test_missing_command_usage_error(self):
        assert run_cli() == EXIT_USAGE

    def test_resolved_config_printed_before_work(self, tmp_path, capsys):
        run_cli("gen-data", "--out", str(tmp_path / "d"), "--seed", "1",
                "--identities", "4", "--observations", "3",
                "--image-size", "24", "--pairs", "10")
        out = capsys.readouterr().out
        assert out.index("resolved configuration") < out.index("wrote ")

    def test_deterministic_forces_single_worker(self, capsys):
        run_cli("info", "--deterministic")
        out = capsys.readouterr().out
        assert "workers = 1" in out

    def test_env_var_overrides_worker_default(self, monkeypatch, capsys):
        monkeypatch.setenv("STN_ALIGN_THREADS", "3")
        run_cli("info")
        assert "workers = 3" in capsys.readouterr().out

    def test_help_documents_flag_defaults(self, capsys):
        with pytest.raises(SystemExit):
            import stn_align.cli as cli
            cli.build_parser().parse_args(["train", "--help"])
        out = capsys.readouterr().out
        assert "--batch-size" in out and "default: 100" in out
        assert "--base-lr" in out and "default: 0.01" in out

    def test_config_file_overrides_flags(self, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("max_iters=2\nbatch_size=6\n")
        out = tmp_path / "run"
        assert run_cli("train", "--out", str(out), "--seed", "1",
                       "--identities", "4", "--observations", "4",
                       "--pairs", "10", "--max-iters", "50",
                       "--config", str(cfg)) == EXIT_OK
        text = (out / "config.txt").read_text()
        assert "max_iters=2" in text and "batch_size=6" in text
