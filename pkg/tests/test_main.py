"""
tests/test_main.py — the command-line surface, end to end on tiny inputs.

Exit codes: 0 success, 1 usage error, 2 runtime error with `error: ...`
on stderr.
"""

import logging

import pandas as pd
import pytest

import main
from grad_suite import CASES, GradCase
from image_io import save_ppm
from models import ABLATION_COLUMNS, REPORT_COLUMNS
from tensor_core import Tensor, make_rng

MICRO_CFG = """\
image_size = 16
encoder_channels = 4,8
token_conv_layers = 2
volume_size = 4
volume_channels = 2
discriminator_channels = 4,8
batch_size = 2
stage1_steps = 2
stage2_steps = 1
log_interval = 1
precision = float64
"""

GEN_SMALL = ["gen-data", "--objects", "5", "--size", "16", "--azimuths", "2", "--elevations", "0", "--grid", "8"]


@pytest.fixture(autouse=True)
def restore_root_handlers():
    """main() installs a stderr handler bound to the captured stream; drop it afterwards."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture(autouse=True)
def isolated_data_dir(tmp_path, monkeypatch):
    """Default output locations point under tmp_path, never at ./data."""
    root = tmp_path / "data"
    monkeypatch.setattr(main.data_paths, "DATA_DIR", root)
    monkeypatch.setattr(main.data_paths, "DATASETS_DIR", root / "datasets")
    monkeypatch.setattr(main.data_paths, "DEFAULT_DATASET_DIR", root / "datasets" / "procedural")
    monkeypatch.setattr(main.data_paths, "RUNS_DIR", root / "runs")
    monkeypatch.setattr(main.data_paths, "REPORTS_DIR", root / "reports")
    return root


@pytest.fixture
def workspace(tmp_path):
    """A generated micro dataset and a run config next to it."""
    ds = tmp_path / "ds"
    rc = main.main(["--seed", "5", "--out", str(ds), "gen-data", "--objects", "5", "--size", "16",
                    "--azimuths", "4", "--elevations", "0", "--grid", "8"])
    assert rc == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text(MICRO_CFG)
    return tmp_path, ds, cfg


@pytest.fixture
def trained(workspace):
    tmp, ds, cfg = workspace
    run = tmp / "run"
    rc = main.main(["--out", str(run), "train", "--config", str(cfg), "--dataset", str(ds)])
    assert rc == 0
    return tmp, ds, run


# ---------------------------------------------------------------------------
# Usage
# ---------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert main.main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error(capsys):
    assert main.main(["train", "--bogus"]) == 1
    assert "unrecognized arguments" in capsys.readouterr().err


def test_missing_command_is_a_usage_error():
    assert main.main([]) == 1


def test_bad_pose_is_a_usage_error(capsys):
    assert main.main(["synth", "--checkpoint", "x", "--image", "y", "--pose", "left"]) == 1


def test_missing_config_is_a_runtime_error(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main.main(["train", "--config", str(missing)]) == 2
    err = capsys.readouterr().err
    assert "error:" in err and str(missing) in err


def test_stage2_without_resume(workspace, capsys):
    _, ds, cfg = workspace
    assert main.main(["train", "--config", str(cfg), "--dataset", str(ds), "--stage", "2"]) == 2
    assert "--resume" in capsys.readouterr().err


def test_global_flags_after_the_command(tmp_path):
    after, before = tmp_path / "after", tmp_path / "before"
    assert main.main([*GEN_SMALL, "--seed", "7", "--out", str(after)]) == 0
    assert main.main(["--seed", "7", "--out", str(before), *GEN_SMALL]) == 0
    assert (after / "manifest.tsv").read_bytes() == (before / "manifest.tsv").read_bytes()
    rel = pd.read_csv(after / "manifest.tsv", sep="\t")["relative_path"][0]
    assert (after / rel).read_bytes() == (before / rel).read_bytes()


def test_top_level_flags_survive_a_command_without_them(tmp_path):
    out = tmp_path / "ds"
    assert main.main(["--seed", "7", "--out", str(out), *GEN_SMALL, "--workers", "1"]) == 0
    assert (out / "manifest.tsv").is_file()
    assert not (tmp_path / "data" / "datasets").exists()


def test_verbose_after_the_command(capsys):
    assert main.main(["grad-check", "--seeds", "1", "--case", "binary.add", "--verbose"]) == 0
    assert logging.getLogger().level == logging.DEBUG


def test_gen_data_default_location(isolated_data_dir, capsys):
    assert main.main([*GEN_SMALL, "--seed", "2"]) == 0
    assert (isolated_data_dir / "datasets" / "procedural" / "manifest.tsv").is_file()
    for name in ("runs", "reports"):
        assert (isolated_data_dir / name).is_dir()


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def test_gen_data_reports_split(workspace, capsys):
    tmp, _, _ = workspace
    rc = main.main(["--out", str(tmp / "ds2"), "gen-data", "--objects", "5", "--size", "16",
                    "--azimuths", "2", "--elevations", "0,10", "--grid", "8"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "objects: 5 (train 4, test 1)" in out
    assert "poses: 4" in out


def test_gen_data_every_category(tmp_path, capsys):
    out = tmp_path / "mixed"
    assert main.main([*GEN_SMALL, "--objects", "6", "--category", "all", "--out", str(out)]) == 0
    assert "categories: chair, car" in capsys.readouterr().out
    manifest = pd.read_csv(out / "manifest.tsv", sep="\t")
    assert set(manifest["category"]) == {"chair", "car"}


def test_gen_data_unknown_category_is_a_usage_error(capsys):
    assert main.main([*GEN_SMALL, "--category", "boat"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_train_writes_run_artifacts(trained, capsys):
    _, _, run = trained
    for name in ("run.cfg", "stage1.ckpt", "stage2.ckpt", "loss_stage1.tsv", "loss_stage2.tsv"):
        assert (run / name).is_file(), name
    assert len(pd.read_csv(run / "loss_stage1.tsv", sep="\t")) == 2


def test_resume_continues_stage2(trained):
    tmp, ds, run = trained
    rc = main.main(["--out", str(tmp / "again"), "train", "--resume", str(run / "stage1.ckpt"),
                    "--dataset", str(ds), "--stage", "2"])
    assert rc == 0
    assert (tmp / "again" / "stage2.ckpt").is_file()


def test_eval_writes_report_and_pdf(trained, capsys):
    tmp, ds, run = trained
    out = tmp / "reports"
    rc = main.main(["--out", str(out), "eval", "--checkpoint", str(run / "stage2.ckpt"),
                    "--dataset", str(ds), "--pdf", "--workers", "2"])
    assert rc == 0
    report = pd.read_csv(out / "report.tsv", sep="\t")
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 12
    assert (out / "report.pdf").read_bytes().startswith(b"%PDF")
    assert "rows: 12" in capsys.readouterr().out


def test_eval_category_rows_and_pose_noise(trained, capsys):
    tmp, ds, run = trained
    out = tmp / "reports_chair"
    rc = main.main(["eval", "--checkpoint", str(run / "stage2.ckpt"), "--dataset", str(ds),
                    "--category", "chair", "--pose-noise", "5", "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "category chair: rows 12" in printed
    assert "pose-noise: identical over 4 views" in printed
    assert set(pd.read_csv(out / "report.tsv", sep="\t")["category"]) == {"chair"}


def test_eval_missing_category_is_a_runtime_error(trained, capsys):
    _, ds, run = trained
    rc = main.main(["eval", "--checkpoint", str(run / "stage2.ckpt"), "--dataset", str(ds), "--category", "car"])
    assert rc == 2
    assert "car" in capsys.readouterr().err


def test_eval_defaults_to_the_reports_dir(trained, isolated_data_dir):
    _, ds, run = trained
    assert main.main(["eval", "--checkpoint", str(run / "stage2.ckpt"), "--dataset", str(ds)]) == 0
    assert (isolated_data_dir / "reports" / "report.tsv").is_file()
    assert (isolated_data_dir / "runs").is_dir()


def test_eval_heldout_only_needs_heldout_poses(trained, capsys):
    _, ds, run = trained
    rc = main.main(["eval", "--checkpoint", str(run / "stage2.ckpt"), "--dataset", str(ds), "--heldout-only"])
    assert rc == 2
    assert "heldout_poses" in capsys.readouterr().err


def test_synth_and_probe(trained, capsys):
    tmp, ds, run = trained
    image = save_ppm(make_rng(0).uniform(0, 1, (3, 16, 16)), tmp / "photo.ppm")
    rc = main.main(["--out", str(tmp / "synth"), "synth", "--checkpoint", str(run / "stage2.ckpt"),
                    "--image", str(image), "--pose", "90,0", "--pose", "180,0"])
    assert rc == 0
    assert (tmp / "synth" / "synth_90_0.ppm").is_file()
    assert (tmp / "synth" / "synth_mosaic.ppm").is_file()

    rc = main.main(["--out", str(tmp / "probe"), "probe", "--checkpoint", str(run / "stage2.ckpt"),
                    "--dataset", str(ds), "--others", "2"])
    assert rc == 0
    table = pd.read_csv(tmp / "probe" / "probe.tsv", sep="\t")
    assert len(table) == 1
    assert (tmp / "probe" / f"probe_{table['object'][0]}.ppm").is_file()


def test_probe_unknown_object(trained, capsys):
    _, ds, run = trained
    rc = main.main(["probe", "--checkpoint", str(run / "stage2.ckpt"), "--dataset", str(ds),
                    "--object", "obj9999"])
    assert rc == 2
    assert "obj9999" in capsys.readouterr().err


def test_ablate_and_sweep(workspace, capsys):
    tmp, ds, cfg = workspace
    rc = main.main(["--out", str(tmp / "exp"), "ablate-reverse", "--config", str(cfg), "--dataset", str(ds),
                    "--pdf"])
    assert rc == 0
    assert list(pd.read_csv(tmp / "exp" / "ablation.tsv", sep="\t").columns) == ABLATION_COLUMNS
    assert (tmp / "exp" / "ablation.pdf").read_bytes().startswith(b"%PDF")

    rc = main.main(["--out", str(tmp / "exp"), "sweep-ref-pose", "--config", str(cfg), "--dataset", str(ds),
                    "--pose", "0,0", "--pose", "90,0", "--pdf"])
    assert rc == 0
    assert (tmp / "exp" / "sweep.pdf").read_bytes().startswith(b"%PDF")
    assert len(pd.read_csv(tmp / "exp" / "sweep.tsv", sep="\t")) == 2
    assert "L1 spread:" in capsys.readouterr().out


def test_grad_check_command(capsys):
    assert main.main(["grad-check", "--seeds", "1", "--case", "binary.add", "--case", "reduce.sum"]) == 0
    out = capsys.readouterr().out
    assert "PASS: binary.add seed=0" in out
    assert out.rstrip().endswith("RESULT: PASS")


def test_grad_check_failure_exits_two(monkeypatch, capsys):
    def wrong(seed):
        x = Tensor([1.0, 2.0], requires_grad=True)
        return (lambda t: (t * t.detach()).sum()), x

    monkeypatch.setitem(CASES, "binary.add", GradCase("binary.add", wrong))
    assert main.main(["grad-check", "--seeds", "1", "--case", "binary.add"]) == 2
    captured = capsys.readouterr()
    assert "FAIL: binary.add" in captured.out
    assert "RESULT: FAIL" in captured.out
    assert "gradient check failed" in captured.err
