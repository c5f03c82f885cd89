import csv
import json

import numpy as np
import pytest
from PIL import Image

import mde.verify
from mde.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from mde.diff.tensor import emit

TINY = ["--image-size", "16", "--base-width", "4", "--depth", "2", "--bottleneck", "16",
        "--batch-size", "4", "--n-images", "16", "--feature-width", "4"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--task", "re", "--s", "0.25", "--steps", "8", "--seed", "7",
                 "--checkpoint-interval", "4", *TINY, "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestTrain:
    def test_outputs(self, trained):
        assert len(read_rows(trained / "train.csv")) == 8
        assert (trained / "final.mde").is_file()
        assert (trained / "checkpoints" / "step_000004.mde").is_file()
        assert (trained / "samples" / "final.png").is_file()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["seed"] == 7
        assert manifest["config"]["use_hns"] is True and manifest["config"]["lr_gen"] == 2e-4

    def test_sample_grid_has_four_columns(self, trained):
        w, h = Image.open(trained / "samples" / "final.png").size
        assert w == 4 * 16 + 3 and h == 8 * 16 + 7

    def test_hns_on_rejected_for_reverse_inpainting(self, tmp_path, capsys):
        code = main(["train", "--task", "ri", "--hns", "on", *TINY, "--out", str(tmp_path)])
        assert code == EXIT_CONFIG
        assert "use_hns" in capsys.readouterr().err

    def test_hns_auto_disables_for_inpainting(self, tmp_path):
        assert main(["train", "--task", "ri", "--steps", "2", *TINY, "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["config"]["use_hns"] is False

    def test_flags_override_file_and_config_is_echoed(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("task = rec\nsteps = 50\nseed = 3\n")
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--steps", "2", *TINY, "--out", str(out)]) == 0
        echoed = capsys.readouterr().out
        assert "steps = 2" in echoed and "seed = 3" in echoed and "task = rec" in echoed
        assert len(read_rows(out / "train.csv")) == 2

    def test_invalid_field_named_before_training(self, tmp_path, capsys):
        assert main(["train", "--s", "1.5", "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "s:" in capsys.readouterr().err
        assert not (tmp_path / "train.csv").exists()

    def test_manifest_written_before_compute(self, tmp_path):
        code = main(["train", "--task", "re", "--dataset", "manifest", "--data-path",
                     str(tmp_path / "missing.txt"), *TINY, "--out", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert (tmp_path / "o" / "manifest.json").is_file()

    def test_replay_reproduces_csv(self, trained, tmp_path):
        assert main(["replay", str(trained / "manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "train.csv").read_bytes() == (trained / "train.csv").read_bytes()

    def test_resume_appends_identical_rows(self, trained, tmp_path):
        lines = (trained / "train.csv").read_text().splitlines(keepends=True)
        (tmp_path / "train.csv").write_text("".join(lines[:5]))
        code = main(["train", "--resume", str(trained / "checkpoints" / "step_000004.mde"),
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / "train.csv").read_text() == "".join(lines)

    def test_resume_rejects_overrides(self, trained, tmp_path):
        code = main(["train", "--resume", str(trained / "final.mde"), "--steps", "20",
                     "--out", str(tmp_path)])
        assert code == EXIT_CONFIG


class TestComplete:
    def test_samples_per_input(self, trained, tmp_path):
        code = main(["complete", "--checkpoint", str(trained / "final.mde"), "--n", "3",
                     "--samples", "5", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_rows(tmp_path / "metrics.csv")
        assert len(rows) == 15
        assert len(list((tmp_path / "completions").glob("*.png"))) == 15

    def test_deterministic_per_seed(self, trained, tmp_path):
        for name in ("a", "b"):
            main(["complete", "--checkpoint", str(trained / "final.mde"), "--n", "2",
                  "--samples", "2", "--seed", "4", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "metrics.csv").read_text() == \
            (tmp_path / "b" / "metrics.csv").read_text()

    def test_size_mismatch_needs_resize(self, trained, tmp_path):
        png = tmp_path / "big.png"
        Image.fromarray(np.full((24, 20, 3), 128, np.uint8)).save(png)
        args = ["complete", "--checkpoint", str(trained / "final.mde"), "--input", str(png)]
        assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
        assert main([*args, "--resize", "--out", str(tmp_path / "b")]) == EXIT_OK


class TestResample:
    def test_ten_steps_give_eleven_columns(self, trained, tmp_path):
        code = main(["resample", "--checkpoint", str(trained / "final.mde"), "--n", "2",
                     "--steps", "10", "--out", str(tmp_path)])
        assert code == EXIT_OK
        w, h = Image.open(tmp_path / "resample.png").size
        assert w == 11 * 16 + 10 and h == 2 * 16 + 1

    def test_zero_steps_rejected(self, trained, tmp_path):
        code = main(["resample", "--checkpoint", str(trained / "final.mde"), "--steps", "0",
                     "--out", str(tmp_path)])
        assert code == EXIT_CONFIG


class TestEval:
    def test_occlusions_six_rows(self, trained, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(trained / "final.mde"), "--protocol",
                     "occlusions", "--n", "4", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_rows(tmp_path / "report.csv")
        assert [r["occlusion"] for r in rows] == ["right_half", "left_half", "both_eyes",
                                                  "right_eye", "left_eye", "mouth"]
        assert all(set(r) == {"occlusion", "psnr", "ssim"} for r in rows)
        assert "right_half" in capsys.readouterr().out

    def test_task_matrix_shape(self, trained, tmp_path):
        ckpts = [str(trained / "final.mde"), str(trained / "checkpoints" / "step_000004.mde")]
        code = main(["eval", "--checkpoint", *ckpts, "--protocol", "task-matrix",
                     "--tasks", "re,rec,i", "--n", "4", "--out", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_rows(tmp_path / "report.csv")
        assert [(r["train_task"], r["test_task"]) for r in rows][:3] == \
            [("final", "re"), ("final", "rec"), ("final", "i")]
        assert len(rows) == 6

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "nope.mde"), "--protocol",
                     "occlusions", "--out", str(tmp_path)])
        assert code == EXIT_RUNTIME
        assert "nope.mde" in capsys.readouterr().err


class TestMaskStats:
    def test_columns_and_values(self, tmp_path):
        assert main(["mask-stats", "--task", "re", "--s", "0.25", "--size", "32", "--n", "500",
                     "--out", str(tmp_path)]) == 0
        rows = {r["quantity"]: r for r in read_rows(tmp_path / "mask_stats.csv")}
        assert float(rows["dropped"]["analytic"]) == 0.75
        assert abs(float(rows["dropped"]["empirical"]) - 0.75) < 0.01

    def test_colorization_one_channel(self, tmp_path):
        assert main(["mask-stats", "--task", "col", "--k", "1", "--n", "10", "--size", "16",
                     "--out", str(tmp_path)]) == 0
        rows = {r["quantity"]: r for r in read_rows(tmp_path / "mask_stats.csv")}
        assert float(rows["dropped"]["empirical"]) == 0.0
        assert float(rows["masked_entries"]["empirical"]) == pytest.approx(2 / 3, abs=1e-6)

    def test_k_only_for_colorization(self, tmp_path):
        assert main(["mask-stats", "--task", "re", "--k", "1", "--out", str(tmp_path)]) == 1


class TestGradCheck:
    def test_subset_passes(self, tmp_path):
        code = main(["grad-check", "--cases", "conv2d,loss_gen_adv", "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert [r["status"] for r in read_rows(tmp_path / "grad_check.csv")] == ["PASS", "PASS"]

    def test_wrong_sign_gives_verification_exit(self, tmp_path, monkeypatch, capsys):
        original = mde.verify.build_case

        def broken(name):
            fn, params = original(name)
            x = params["x"]
            return (lambda: emit("square", x.data ** 2, (x,), lambda g: (-2 * x.data * g,)).sum(),
                    params)

        monkeypatch.setattr(mde.verify, "build_case", broken)
        assert main(["grad-check", "--cases", "square", "--out", str(tmp_path)]) == EXIT_VERIFY
        assert "FAIL square: x" in capsys.readouterr().err

    def test_unknown_case(self, tmp_path):
        assert main(["grad-check", "--cases", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_usage_error_exit_code(capsys):
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG
