"""End-to-end command-line workflow tests (in-process main calls)."""

import hashlib
import json
import os

import numpy as np
import pytest
from PIL import Image

from falconseg import cli
from falconseg.data_io import read_source


OVR = ["-o", "network.input_size=[16,16]", "-o", "network.support_k=3",
       "-o", "train.episodes=30", "-o", "train.ft_epochs=2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_hashes(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            p = os.path.join(dirpath, n)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = hashlib.sha256(f.read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One synth + train + finetune pipeline shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--domain", "source", "--out", root / "src",
               "--classes", 4, "--samples", 8, "--size", 16, "--seed", 5) == 0
    assert run("synth", "--domain", "target", "--out", root / "tgt_train",
               "--patients", 3, "--slices", 10, "--size", 16, "--seed", 6,
               "--split", "train") == 0
    assert run("synth", "--domain", "target", "--out", root / "tgt_val",
               "--patients", 1, "--slices", 10, "--size", 16, "--seed", 7,
               "--split", "val") == 0
    assert run("synth", "--domain", "target", "--out", root / "tgt_test",
               "--patients", 2, "--slices", 10, "--size", 16, "--seed", 8,
               "--split", "test") == 0
    assert run("train", "--source", root / "src", "--out", root / "run_train",
               *OVR, "--seed", 1) == 0
    assert run("finetune", "--data", root / "tgt_train",
               "--val", root / "tgt_val",
               "--checkpoint", root / "run_train" / "checkpoint.npz",
               "--out", root / "run_ft", *OVR, "--seed", 1) == 0
    return root


class TestUsage:
    def test_no_subcommand(self):
        assert run() == 2

    def test_help_lists_subcommands(self, capsys):
        assert run("--help") == 0
        text = capsys.readouterr().out
        for name in ("synth", "train", "finetune", "infer", "eval",
                     "eval-masks", "ablate", "report"):
            assert name in text

    def test_subcommand_help_lists_flags(self, capsys):
        assert run("synth", "--help") == 0
        text = capsys.readouterr().out
        for flag in ("--domain", "--fraction", "--split", "--override"):
            assert flag in text

    def test_invalid_fraction(self, tmp_path):
        assert run("synth", "--domain", "target", "--out", tmp_path / "x",
                   "--fraction", "1.5") == 2

    def test_unknown_flag(self, tmp_path):
        assert run("synth", "--domain", "target", "--out", tmp_path / "x",
                   "--bogus") == 2

    def test_bad_seed_list(self, tmp_path):
        assert run("ablate", "--out", tmp_path / "x", "--seeds", "a,b") == 2


class TestSynth:
    def test_target_layout(self, work):
        root = work / "tgt_train"
        manifest = json.loads((root / "manifest.json").read_text())
        assert {p["id"] for p in manifest["patients"]} == {
            "train_p00", "train_p01", "train_p02"}
        assert (root / "train_p00" / "slices" / "0000.png").exists()
        assert (root / "resolved_config.json").exists()

    def test_source_round_trip(self, work):
        ds = read_source(str(work / "src"))
        assert len(ds.classes) == 4
        assert all(len(v) == 8 for v in ds.samples.values())

    def test_idempotent(self, work, tmp_path):
        assert run("synth", "--domain", "target", "--out", tmp_path / "again",
                   "--patients", 3, "--slices", 10, "--size", 16, "--seed", 6,
                   "--split", "train") == 0
        assert tree_hashes(tmp_path / "again") == tree_hashes(work / "tgt_train")


class TestTrain:
    def test_artifacts(self, work):
        out = work / "run_train"
        assert (out / "checkpoint.npz").exists()
        assert (out / "resolved_config.json").exists()
        recs = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
        assert len(recs) == 30
        assert all(r["phase"] == "meta" for r in recs)

    def test_idempotent(self, work, tmp_path):
        assert run("train", "--source", work / "src", "--out", tmp_path / "b",
                   *OVR, "--seed", 1) == 0
        assert tree_hashes(tmp_path / "b") == tree_hashes(work / "run_train")

    def test_resume_matches_straight_run(self, work, tmp_path):
        half = list(OVR)
        half[half.index("train.episodes=30")] = "train.episodes=15"
        assert run("train", "--source", work / "src", "--out", tmp_path / "h",
                   *half, "--seed", 1) == 0
        assert run("train", "--source", work / "src", "--out", tmp_path / "r",
                   "--resume", tmp_path / "h" / "checkpoint.npz",
                   *OVR, "--seed", 1) == 0
        a = (tmp_path / "r" / "checkpoint.npz").read_bytes()
        b = (work / "run_train" / "checkpoint.npz").read_bytes()
        assert a == b


class TestFinetune:
    def test_artifacts(self, work):
        out = work / "run_ft"
        assert (out / "checkpoint.npz").exists()
        recs = [json.loads(l) for l in (out / "log.jsonl").read_text().splitlines()]
        phases = {r["phase"] for r in recs}
        assert "baaf" in phases and "baaf_disc" in phases


class TestInfer:
    def test_outputs(self, work, tmp_path):
        assert run("infer", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path) == 0
        pdir = tmp_path / "predictions" / "test_p00"
        pngs = sorted(p.name for p in pdir.glob("*.png"))
        assert pngs == [f"{i:04d}.png" for i in range(10)]
        meta = json.loads((pdir / "result.json").read_text())
        assert len(meta["support_indices"]) == 3
        assert meta["threshold"] == 0.5
        arr = np.asarray(Image.open(pdir / "0000.png"))
        assert set(np.unique(arr)) <= {0, 255}

    def test_single_patient_filter(self, work, tmp_path):
        assert run("infer", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--patient", "test_p01", "--out", tmp_path) == 0
        assert [p.name for p in (tmp_path / "predictions").iterdir()] == ["test_p01"]

    def test_unknown_patient_exit3(self, work, tmp_path):
        assert run("infer", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--patient", "nope", "--out", tmp_path) == 3

    def test_network_mismatch_exit4(self, work, tmp_path):
        assert run("infer", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path, "-o", "network.bottleneck_channels=16") == 4


class TestEval:
    def test_report_row_per_task(self, work, tmp_path):
        assert run("eval", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path, "--split", "test") == 0
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 2  # header + one row per test patient
        assert (tmp_path / "summary.txt").read_text().startswith("tasks: 2")

    def test_idempotent(self, work, tmp_path):
        for d in ("a", "b"):
            assert run("eval", "--data", work / "tgt_test",
                       "--checkpoint", work / "run_ft" / "checkpoint.npz",
                       "--out", tmp_path / d, "--split", "test") == 0
        assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")

    def test_empty_split_exit3(self, work, tmp_path):
        assert run("eval", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path, "--split", "val") == 3

    def test_bad_aggregate_exit2(self, work, tmp_path):
        assert run("eval", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path, "--aggregate", "median") == 2


def _write_mask(path, arr):
    Image.fromarray((np.asarray(arr) * 255).astype(np.uint8), "L").save(path)


class TestEvalMasks:
    @pytest.fixture()
    def masks(self, tmp_path):
        a = np.zeros((8, 8), np.uint8)
        a[2:5, 2:5] = 1
        _write_mask(tmp_path / "a.png", a)
        _write_mask(tmp_path / "b.png", a)
        _write_mask(tmp_path / "empty.png", np.zeros((8, 8), np.uint8))
        _write_mask(tmp_path / "small.png", np.zeros((4, 4), np.uint8))
        return tmp_path

    def test_identical(self, masks, capsys):
        assert run("eval-masks", masks / "a.png", masks / "b.png") == 0
        out = capsys.readouterr().out
        assert "dsc: 1.000000" in out
        assert "hd95_symmetric: 0.000000" in out
        assert "flag:" not in out

    def test_empty_pred_sentinel_and_flag(self, masks, capsys):
        assert run("eval-masks", masks / "empty.png", masks / "a.png") == 0
        out = capsys.readouterr().out
        assert "flag: empty_pred" in out
        assert f"hd95_symmetric: {np.hypot(8, 8):.6f}" in out

    def test_shape_mismatch_exit3(self, masks):
        assert run("eval-masks", masks / "a.png", masks / "small.png") == 3

    def test_missing_file_exit3(self, masks):
        assert run("eval-masks", masks / "a.png", masks / "nope.png") == 3


class TestReport:
    def test_loss_curves_and_determinism(self, work, tmp_path):
        for d in ("f1", "f2"):
            assert run("report", "--run", work / "run_ft",
                       "--out", tmp_path / d) == 0
        assert (tmp_path / "f1" / "loss_curves.png").stat().st_size > 0
        assert tree_hashes(tmp_path / "f1") == tree_hashes(tmp_path / "f2")

    def test_metrics_and_overlays(self, work, tmp_path):
        assert run("eval", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path / "ev", "--split", "test") == 0
        assert run("infer", "--data", work / "tgt_test",
                   "--checkpoint", work / "run_ft" / "checkpoint.npz",
                   "--out", tmp_path / "inf") == 0
        assert run("report", "--metrics", tmp_path / "ev" / "report.csv",
                   "--pred", tmp_path / "inf" / "predictions",
                   "--data", work / "tgt_test",
                   "--out", tmp_path / "figs") == 0
        names = {p.name for p in (tmp_path / "figs").iterdir()}
        assert names == {"task_bars.png", "overlay_test_p00.png",
                         "overlay_test_p01.png"}

    def test_nothing_to_render_exit2(self, tmp_path):
        assert run("report", "--run", tmp_path, "--out", tmp_path / "o") == 2


class TestSeedPrecedence:
    def test_env_seed_fills_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FALCON_SEED", "42")
        assert run("synth", "--domain", "target", "--out", tmp_path,
                   "--patients", 1, "--slices", 4, "--size", 16) == 0
        snap = json.loads((tmp_path / "resolved_config.json").read_text())
        assert snap["seed"] == 42

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FALCON_SEED", "42")
        assert run("synth", "--domain", "target", "--out", tmp_path,
                   "--patients", 1, "--slices", 4, "--size", 16,
                   "--seed", 9) == 0
        snap = json.loads((tmp_path / "resolved_config.json").read_text())
        assert snap["seed"] == 9

    def test_bad_env_exit4(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FALCON_SEED", "oops")
        assert run("synth", "--domain", "target", "--out", tmp_path,
                   "--patients", 1, "--slices", 4) == 4


class TestAblate:
    def test_micro_suite(self, tmp_path):
        assert run("ablate", "--out", tmp_path, "--seeds", "0",
                   "-o", "train.episodes=4", "-o", "train.ft_epochs=1",
                   "-o", "train.early_stop_patience=0") == 0
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert len(lines) == 1 + 5
        assert (tmp_path / "ablation.txt").read_text().startswith("config")
