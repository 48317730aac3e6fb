"""
tests/test_evaluation.py — metrics, the intrinsic probe and the experiments.

The metric pipeline is checked with an oracle synthesizer that looks up
the ground-truth view of whichever object the source image belongs to:
it must score L1 = 0 and SSIM = 1 on every row.
"""

import numpy as np
import pandas as pd
import pytest

from dataset import build_dataset
from evaluation import (
    EvalReport,
    UnknownObjectError,
    evaluate,
    inter_distance,
    intra_distance,
    l1_spread,
    pose_noise_invariance,
    probe_intrinsic,
    probe_objects,
    reference_pose_sweep,
    reverse_mapping_ablation,
    synth_command,
)
from geometry import Pose
from image_io import load_image, save_ppm
from model import ModelConfig, init_model_params
from models import ABLATION_COLUMNS, CATEGORY_COLUMNS, PROBE_COLUMNS, REPORT_COLUMNS, SWEEP_COLUMNS
from tensor_core import Tensor, make_rng
from training import config_overrides

from conftest import MICRO_POSES


def _oracle(dataset):
    by_bytes = {dataset.load_view(r).tobytes(): r.object_id for r in dataset.refs()}

    def run(source, targets):
        object_id = by_bytes[source.data[0].tobytes()]
        views = [dataset.load_view(dataset.view(object_id, pose)) for pose in targets]
        return Tensor(np.stack(views), dtype=source.dtype)

    return run


@pytest.fixture
def params(micro_model):
    return init_model_params(micro_model, 0)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_oracle_scores_perfectly(micro_model, micro_dataset):
    report = evaluate({}, micro_model, micro_dataset, synthesizer=_oracle(micro_dataset))
    assert report.count == 1 * len(MICRO_POSES) * (len(MICRO_POSES) - 1)
    assert list(report.rows.columns) == REPORT_COLUMNS
    assert (report.rows["L1"] == 0.0).all()
    assert (report.rows["SSIM"] == 1.0).all()
    assert (report.rows["copy_L1"] >= 0.0).all() and report.mean_copy_l1 > 0.0
    assert report.beats_copy_fraction == float((report.rows["copy_L1"] > 0.0).mean())


def test_rows_cover_every_ordered_pose_pair(micro_model, micro_dataset):
    report = evaluate({}, micro_model, micro_dataset, synthesizer=_oracle(micro_dataset))
    pairs = set(zip(report.rows["src_az"], report.rows["tgt_az"]))
    labels = [f"{p.azimuth:g}" for p in MICRO_POSES]
    assert pairs == {(a, b) for a in labels for b in labels if a != b}


def test_source_pose_filter(micro_model, micro_dataset):
    report = evaluate({}, micro_model, micro_dataset, synthesizer=_oracle(micro_dataset),
                      source_poses=[Pose(90, 0)])
    assert report.count == 3
    assert set(report.rows["src_az"]) == {"90"}


def test_model_evaluation_is_deterministic_across_workers(params, micro_model, micro_dataset, tmp_path):
    a = evaluate(params, micro_model, micro_dataset, split="train", workers=1)
    b = evaluate(params, micro_model, micro_dataset, split="train", workers=3,
                 report_path=tmp_path / "report.tsv")
    pd.testing.assert_frame_equal(a.rows, b.rows)
    assert a.count == 4 * 4 * 3
    assert ((a.rows["SSIM"] >= -1.0) & (a.rows["SSIM"] <= 1.0)).all()
    saved = pd.read_csv(tmp_path / "report.tsv", sep="\t")
    assert list(saved.columns) == REPORT_COLUMNS and len(saved) == a.count


def test_image_size_mismatch(params, micro_dataset):
    with pytest.raises(ValueError, match="16x16"):
        evaluate(params, ModelConfig(image_size=32, encoder_channels=(4, 8)), micro_dataset)


def test_report_aggregates():
    rows = pd.DataFrame([
        ["a", "chair", "0", "0", "90", "0", 0.1, 0.9, 0.2],
        ["a", "chair", "90", "0", "0", "0", 0.3, 0.7, 0.2],
    ], columns=REPORT_COLUMNS)
    report = EvalReport(rows)
    assert report.mean_l1 == pytest.approx(0.2)
    assert report.beats_copy_fraction == 0.5
    assert report.by_target_pose()["tgt_az"].tolist() == ["90", "0"]
    assert np.isnan(EvalReport(rows.iloc[:0]).mean_ssim)


def test_report_by_category():
    rows = pd.DataFrame([
        ["b", "car", "0", "0", "90", "0", 0.4, 0.5, 0.3],
        ["a", "chair", "0", "0", "90", "0", 0.1, 0.9, 0.2],
        ["a", "chair", "90", "0", "0", "0", 0.3, 0.7, 0.2],
    ], columns=REPORT_COLUMNS)
    table = EvalReport(rows).by_category()
    assert list(table.columns) == CATEGORY_COLUMNS
    assert table["category"].tolist() == ["car", "chair"]
    assert table["rows"].tolist() == [1, 2]
    assert table["L1"].tolist() == pytest.approx([0.4, 0.2])
    assert table["beats_copy"].tolist() == [0.0, 0.5]


def test_evaluate_mixed_categories(micro_model, tmp_path):
    dataset = build_dataset(6, MICRO_POSES, 16, seed=1, out_dir=tmp_path, grid=8, categories=("chair", "car"))
    oracle = _oracle(dataset)
    report = evaluate({}, micro_model, dataset, synthesizer=oracle)
    pairs = len(MICRO_POSES) * (len(MICRO_POSES) - 1)
    assert report.by_category()["rows"].tolist() == [pairs, pairs]
    for oid, category in zip(report.rows["object"], report.rows["category"]):
        assert dataset.category_of(oid) == category

    cars = evaluate({}, micro_model, dataset, synthesizer=oracle, category="car")
    assert set(cars.rows["category"]) == {"car"}
    assert cars.count == pairs
    with pytest.raises(ValueError, match="car"):
        evaluate({}, micro_model, build_dataset(5, MICRO_POSES, 16, seed=1, out_dir=tmp_path / "chairs", grid=8),
                 synthesizer=oracle, category="car")


# ---------------------------------------------------------------------------
# Probe
# ---------------------------------------------------------------------------

def test_distances_on_known_values():
    reps = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
    assert intra_distance(reps) == pytest.approx((1.0 + 1.0 + 1.0) / 3)
    assert intra_distance(np.ones((3, 4))) == 0.0
    assert intra_distance(reps[:1]) == 0.0
    assert inter_distance(np.zeros((1, 2)), np.full((2, 2), 3.0)) == 3.0


def test_intra_distance_ignores_view_order():
    reps = make_rng(0).standard_normal((5, 3, 4, 4))
    assert intra_distance(reps) == pytest.approx(intra_distance(reps[::-1]))
    assert intra_distance(reps) == pytest.approx(intra_distance(reps[[2, 0, 4, 1, 3]]))


def test_probe_writes_mosaic(params, micro_model, micro_dataset, tmp_path):
    oid = micro_dataset.object_ids()[0]
    result = probe_intrinsic(params, micro_model, micro_dataset, oid, n_others=2,
                             mosaic_path=tmp_path / "m.ppm")
    assert result.views == len(MICRO_POSES)
    assert result.mean_intra_distance >= 0.0 and result.mean_inter_distance > 0.0
    assert result.mosaic.shape == (3, 2 * 16 + 2, 4 * 16 + 3 * 2)
    assert load_image(tmp_path / "m.ppm").shape == result.mosaic.shape


def test_probe_unknown_object(params, micro_model, micro_dataset):
    with pytest.raises(UnknownObjectError):
        probe_intrinsic(params, micro_model, micro_dataset, "obj9999")


def test_probe_objects_table(params, micro_model, micro_dataset, tmp_path):
    ids = micro_dataset.object_ids()[:2]
    table = probe_objects(params, micro_model, micro_dataset, ids, n_others=1, mosaic_dir=tmp_path)
    assert list(table.columns) == PROBE_COLUMNS
    assert table["object"].tolist() == ids
    assert all((tmp_path / f"probe_{oid}.ppm").is_file() for oid in ids)


def test_training_tightens_the_intrinsic_representation(smoke_run, micro_dataset):
    model = smoke_run.config.model
    ids = micro_dataset.object_ids()
    before = probe_objects(smoke_run.untrained, model, micro_dataset, ids, n_others=len(ids) - 1)
    after = probe_objects(smoke_run.state.params, model, micro_dataset, ids, n_others=len(ids) - 1)
    assert np.isfinite(after["ratio"]).all()
    assert after["ratio"].mean() < before["ratio"].mean()


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def test_pose_metadata_noise_changes_nothing(params, micro_model, micro_dataset):
    result = pose_noise_invariance(params, micro_model, micro_dataset, std=5.0, seed=1)
    assert result.views == len(MICRO_POSES)
    assert result.identical and result.max_abs_diff == 0.0


def test_synth_command_writes_views_and_mosaic(params, micro_model, tmp_path):
    src = save_ppm(make_rng(2).uniform(0, 1, (3, 20, 20)), tmp_path / "in.ppm")
    poses = [Pose(0, 0), Pose(90, 10)]
    written = synth_command(params, micro_model, src, poses, tmp_path / "out")
    names = [p.name for p in written]
    assert names == ["synth_0_0.ppm", "synth_90_10.ppm", "synth_mosaic.ppm"]
    assert load_image(written[0]).shape == (3, 16, 16)
    with pytest.raises(ValueError):
        synth_command(params, micro_model, src, [], tmp_path / "out")


def test_reference_pose_sweep_single_pose(micro_config, micro_dataset):
    config = config_overrides(micro_config, stage1_steps=2)
    table = reference_pose_sweep(config, micro_dataset, [Pose(90, 0)])
    assert list(table.columns) == SWEEP_COLUMNS
    assert table[["ref_az", "ref_el"]].values.tolist() == [["90", "0"]]
    assert l1_spread(table) == 0.0
    assert np.isfinite(table["L1"]).all()


def test_reverse_mapping_ablation_rows(micro_config, micro_dataset):
    config = config_overrides(micro_config, stage1_steps=2, stage2_steps=1)
    table = reverse_mapping_ablation(config, micro_dataset)
    assert list(table.columns) == ABLATION_COLUMNS
    assert table["variant"].tolist() == ["without reverse mapping", "with reverse mapping"]
    assert table["beats_copy"].between(0, 1).all()
