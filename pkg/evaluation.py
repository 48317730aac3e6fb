"""
evaluation.py — metrics and analysis experiments.

Public API:
  evaluate(params, config, dataset, split="test", ...) -> EvalReport
      every test object, every ordered (source pose, target pose) pair
      with source != target; L1 and SSIM use losses.color_loss / losses.ssim
  probe_intrinsic(params, config, dataset, object_id) -> ProbeResult
      intra- vs inter-object distances of intrinsic representations
  reference_pose_sweep(base_config, dataset, poses) -> DataFrame
  reverse_mapping_ablation(config, dataset) -> DataFrame
  pose_noise_invariance(params, config, dataset, std, seed) -> PoseNoiseResult
  synth_command(params, config, image_path, poses, out_dir) -> list[Path]

Evaluation runs with frozen (detached) parameters, so no graph is built
and objects can be scored on a thread pool. Rows are always emitted in
(object, source pose, target pose) order regardless of `workers`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from dataset import Dataset, ViewRef, iter_objects
from geometry import Pose
from image_io import load_external_image, mosaic, save_mosaic, save_ppm
from losses import color_loss, ssim
from model import ModelConfig, frozen, intrinsic_representation, synthesize
from models import ABLATION_COLUMNS, CATEGORY_COLUMNS, PROBE_COLUMNS, REPORT_COLUMNS, SWEEP_COLUMNS
from tensor_core import Tensor, make_rng, precision
from training import TrainConfig, train_stage1, train_stage2

logger = logging.getLogger(__name__)

Synthesizer = Callable[[Tensor, Sequence[Pose]], Tensor]

PROBE_OTHERS = 10


class UnknownObjectError(ValueError):
    """Raised when an object id is not part of the dataset."""


def model_synthesizer(params: Mapping[str, Tensor], config: ModelConfig) -> Synthesizer:
    """Source image [1, 3, S, S] + target poses -> [T, 3, S, S]."""
    fixed = frozen(params)

    def run(source: Tensor, targets: Sequence[Pose]) -> Tensor:
        return synthesize(source, list(targets), fixed, config)

    return run


def _fmt(angle: float) -> str:
    return f"{angle:g}"


# ---------------------------------------------------------------------------
# EvalReport
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: pd.DataFrame

    @property
    def count(self) -> int:
        return int(len(self.rows))

    @property
    def mean_l1(self) -> float:
        return float(self.rows["L1"].mean()) if self.count else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(self.rows["SSIM"].mean()) if self.count else float("nan")

    @property
    def mean_copy_l1(self) -> float:
        return float(self.rows["copy_L1"].mean()) if self.count else float("nan")

    @property
    def beats_copy_fraction(self) -> float:
        """Share of rows where the synthesized view is closer than the input view."""
        if not self.count:
            return float("nan")
        return float((self.rows["L1"] < self.rows["copy_L1"]).mean())

    def by_target_pose(self) -> pd.DataFrame:
        metrics = {"L1": float, "SSIM": float, "copy_L1": float}
        return (
            self.rows.astype(metrics).groupby(["tgt_az", "tgt_el"], sort=False)[["L1", "SSIM", "copy_L1"]]
            .mean()
            .reset_index()
        )

    def by_category(self) -> pd.DataFrame:
        """One CATEGORY_COLUMNS row per category, in order of first appearance."""
        rows = []
        for category, frame in self.rows.groupby("category", sort=False):
            rows.append({"category": category, **EvalReport(frame).summary()})
        return pd.DataFrame(rows, columns=CATEGORY_COLUMNS)

    def summary(self) -> dict[str, float]:
        return {
            "rows": self.count,
            "L1": self.mean_l1,
            "SSIM": self.mean_ssim,
            "copy_L1": self.mean_copy_l1,
            "beats_copy": self.beats_copy_fraction,
        }

    def to_tsv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, sep="\t", index=False, float_format="%.10g", lineterminator="\n")
        return path


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _score_object(dataset: Dataset, refs: Sequence[ViewRef], synth: Synthesizer,
                  source_poses: Optional[set[Pose]]) -> list[dict]:
    rows = []
    dtype = dataset.load_view(refs[0]).dtype
    for src in refs:
        if source_poses is not None and src.pose not in source_poses:
            continue
        targets = [r for r in refs if r.pose != src.pose]
        if not targets:
            continue
        source = Tensor(dataset.load_view(src)[None], dtype=dtype)
        predicted = synth(source, [t.pose for t in targets])
        for i, tgt in enumerate(targets):
            truth = Tensor(dataset.load_view(tgt)[None], dtype=dtype)
            guess = predicted[i:i + 1].detach()
            rows.append({
                "object": src.object_id,
                "category": src.category,
                "src_az": _fmt(src.pose.azimuth),
                "src_el": _fmt(src.pose.elevation),
                "tgt_az": _fmt(tgt.pose.azimuth),
                "tgt_el": _fmt(tgt.pose.elevation),
                "L1": color_loss(guess, truth).item(),
                "SSIM": ssim(guess, truth).item(),
                "copy_L1": color_loss(source, truth).item(),
            })
    return rows


def evaluate(params: Mapping[str, Tensor], config: ModelConfig, dataset: Dataset, split: str = "test",
             *, source_poses: Optional[Sequence[Pose]] = None, synthesizer: Optional[Synthesizer] = None,
             category: Optional[str] = None, workers: int = 1,
             report_path: Optional[str | Path] = None, progress: bool = False) -> EvalReport:
    """Score every ordered (source, target) pose pair of every `split` object.

    `source_poses` restricts the inputs (e.g. to poses held out of
    training); `category` restricts the objects; `synthesizer` replaces
    the model (used for oracles). Every row carries its object's category,
    so `EvalReport.by_category()` separates chairs from cars.
    """
    size = dataset.image_size
    if size != config.image_size:
        raise ValueError(f"dataset images are {size}x{size} but the model expects {config.image_size}")
    synth = synthesizer or model_synthesizer(params, config)
    allowed = set(source_poses) if source_poses is not None else None
    groups = [[r for r in refs if r.split == split] for _, refs in iter_objects(dataset, split, category)]
    if category is not None and not groups:
        raise ValueError(f"no {split} objects of category {category!r} in {dataset.root}")

    def score(refs: Sequence[ViewRef]) -> list[dict]:
        return _score_object(dataset, refs, synth, allowed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(tqdm(pool.map(score, groups), total=len(groups), desc="evaluate", disable=not progress))
    rows = [row for chunk in results for row in chunk]
    report = EvalReport(pd.DataFrame(rows, columns=REPORT_COLUMNS))
    logger.info(
        "Evaluated %d pairs over %d %s objects: L1=%.4f SSIM=%.4f (copy-source L1=%.4f)",
        report.count, len(groups), split, report.mean_l1, report.mean_ssim, report.mean_copy_l1,
    )
    if report_path is not None:
        report.to_tsv(report_path)
    return report


# ---------------------------------------------------------------------------
# Intrinsic-representation probe
# ---------------------------------------------------------------------------

def intra_distance(reps: np.ndarray) -> float:
    """Mean pairwise L1 (mean over elements) between rows of [V, ...]."""
    flat = reps.reshape(len(reps), -1)
    if len(flat) < 2:
        return 0.0
    total, pairs = 0.0, 0
    for i in range(len(flat) - 1):
        total += float(np.abs(flat[i + 1:] - flat[i]).mean(axis=1).sum())
        pairs += len(flat) - 1 - i
    return total / pairs


def inter_distance(reps: np.ndarray, others: np.ndarray) -> float:
    a = reps.reshape(len(reps), -1)
    b = others.reshape(len(others), -1)
    return float(np.mean([np.abs(b - row).mean(axis=1).mean() for row in a]))


@dataclass
class ProbeResult:
    object_id: str
    views: int
    mean_intra_distance: float
    mean_inter_distance: float
    mosaic: np.ndarray

    @property
    def ratio(self) -> float:
        if self.mean_inter_distance == 0:
            return float("inf")
        return self.mean_intra_distance / self.mean_inter_distance

    def as_row(self) -> dict:
        return {
            "object": self.object_id,
            "views": self.views,
            "mean_intra_distance": self.mean_intra_distance,
            "mean_inter_distance": self.mean_inter_distance,
            "ratio": self.ratio,
        }


def _representations(params: Mapping[str, Tensor], config: ModelConfig, dataset: Dataset,
                     refs: Sequence[ViewRef]) -> np.ndarray:
    images = np.stack([dataset.load_view(r) for r in refs])
    return intrinsic_representation(Tensor(images, dtype=images.dtype), params, config).data


def probe_intrinsic(params: Mapping[str, Tensor], config: ModelConfig, dataset: Dataset, object_id: str,
                    *, n_others: int = PROBE_OTHERS, mosaic_path: Optional[str | Path] = None) -> ProbeResult:
    """How much the intrinsic representation moves across views of one object,
    relative to how far it is from other objects' representations."""
    if object_id not in dataset.object_ids():
        raise UnknownObjectError(f"object {object_id!r} is not in the dataset at {dataset.root}")
    fixed = frozen(params)
    refs = dataset.views_of(object_id)
    reps = _representations(fixed, config, dataset, refs)
    others = [oid for oid in dataset.object_ids() if oid != object_id][:n_others]
    other_reps = [_representations(fixed, config, dataset, dataset.views_of(oid)) for oid in others]
    inter = float(np.mean([inter_distance(reps, o) for o in other_reps])) if other_reps else 0.0

    grid = mosaic([[dataset.load_view(r) for r in refs], list(reps)])
    result = ProbeResult(object_id, len(refs), intra_distance(reps), inter, grid)
    if mosaic_path is not None:
        save_ppm(grid, mosaic_path)
    logger.info("Probe %s: intra=%.4f inter=%.4f ratio=%.4f", object_id,
                result.mean_intra_distance, result.mean_inter_distance, result.ratio)
    return result


def probe_objects(params: Mapping[str, Tensor], config: ModelConfig, dataset: Dataset,
                  object_ids: Sequence[str], *, n_others: int = PROBE_OTHERS,
                  mosaic_dir: Optional[str | Path] = None) -> pd.DataFrame:
    """One PROBE_COLUMNS row per object; mosaics go to `mosaic_dir/probe_<id>.ppm`."""
    rows = []
    for oid in object_ids:
        path = Path(mosaic_dir) / f"probe_{oid}.ppm" if mosaic_dir is not None else None
        rows.append(probe_intrinsic(params, config, dataset, oid, n_others=n_others, mosaic_path=path).as_row())
    return pd.DataFrame(rows, columns=PROBE_COLUMNS)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def reference_pose_sweep(base_config: TrainConfig, dataset: Dataset, poses: Sequence[Pose], *,
                         workers: int = 1, progress: bool = False) -> pd.DataFrame:
    """Train one stage-1 model per reference pose (same seed and steps) and evaluate each."""
    rows = []
    for pose in poses:
        config = replace(base_config, model=replace(base_config.model, reference_pose=pose))
        logger.info("Reference-pose sweep: training with reference %s", pose)
        state, _ = train_stage1(config, dataset, progress=progress)
        with precision(config.precision):
            report = evaluate(state.params, config.model, dataset, workers=workers)
        rows.append({"ref_az": _fmt(pose.azimuth), "ref_el": _fmt(pose.elevation),
                     "L1": report.mean_l1, "SSIM": report.mean_ssim})
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def l1_spread(table: pd.DataFrame) -> float:
    return float(table["L1"].max() - table["L1"].min()) if len(table) else 0.0


def reverse_mapping_ablation(config: TrainConfig, dataset: Dataset, *, workers: int = 1,
                             progress: bool = False) -> pd.DataFrame:
    """Test metrics after stage 1 alone and after stage 1 + reverse mapping."""
    state, _ = train_stage1(config, dataset, progress=progress)
    with precision(config.precision):
        without = evaluate(state.params, config.model, dataset, workers=workers)
    state, _ = train_stage2(config, state, dataset, progress=progress)
    with precision(config.precision):
        with_rm = evaluate(state.params, config.model, dataset, workers=workers)
    rows = [
        {"variant": "without reverse mapping", "L1": without.mean_l1, "SSIM": without.mean_ssim,
         "beats_copy": without.beats_copy_fraction},
        {"variant": "with reverse mapping", "L1": with_rm.mean_l1, "SSIM": with_rm.mean_ssim,
         "beats_copy": with_rm.beats_copy_fraction},
    ]
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


@dataclass(frozen=True)
class PoseNoiseResult:
    views: int
    identical: bool
    max_abs_diff: float


def pose_noise_invariance(params: Mapping[str, Tensor], config: ModelConfig, dataset: Dataset,
                          std: float = 1.0, seed: int = 0, *, split: str = "test",
                          max_views: int = 8) -> PoseNoiseResult:
    """Synthesize from views whose pose metadata carries zero-mean Gaussian
    noise and compare with the clean metadata. The network never reads the
    source pose, so the outputs must be bitwise identical."""
    rng = make_rng(seed)
    refs = dataset.refs(split)[:max_views]
    synth = model_synthesizer(params, config)
    targets = dataset.poses[:2]
    worst, identical = 0.0, True
    for ref in refs:
        az, el = rng.normal(0.0, std, size=2)
        noisy = replace(ref, pose=Pose(ref.pose.azimuth + az, float(np.clip(ref.pose.elevation + el, -90, 90))))
        clean_img = dataset.load_view(ref)
        noisy_img = dataset.load_view(noisy)
        a = synth(Tensor(clean_img[None], dtype=clean_img.dtype), targets).data
        b = synth(Tensor(noisy_img[None], dtype=noisy_img.dtype), targets).data
        identical &= bool(np.array_equal(a, b))
        worst = max(worst, float(np.abs(a - b).max()))
    return PoseNoiseResult(views=len(refs), identical=identical, max_abs_diff=worst)


def synth_command(params: Mapping[str, Tensor], config: ModelConfig, image_path: str | Path,
                  poses: Sequence[Pose], out_dir: str | Path) -> list[Path]:
    """Synthesize `poses` from one external image; writes one PPM per pose plus a mosaic."""
    if not poses:
        raise ValueError("synth needs at least one target pose")
    out_dir = Path(out_dir)
    image = load_external_image(image_path, config.image_size)
    views = model_synthesizer(params, config)(Tensor(image[None], dtype=image.dtype), poses).data
    written = [save_ppm(view, out_dir / f"synth_{pose.label}.ppm") for pose, view in zip(poses, views)]
    written.append(save_mosaic([[image], list(views)], out_dir / "synth_mosaic.ppm"))
    logger.info("Wrote %d synthesized views to %s", len(poses), out_dir)
    return written
