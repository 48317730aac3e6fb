"""
dataset.py — procedural objects, the orthographic renderer and datasets on disk.

Objects are colored occupancy grids built from a few axis-aligned boxes
in one of two layouts (CATEGORIES):

  chair  seat, back, optional one-sided armrest and legs
  car    long body on four wheels, a cabin set back from the front,
         optional rear spoiler

The one-sided armrest and the off-centre cabin break the mirror
symmetries, so appearance reveals pose.

Rendering at pose p rotates the object by rotation_between((0,0), p)
with nearest sampling, then looks down the depth axis from the high-z
face: the first occupied voxel's color, shaded linearly from 1.0 (front)
to 0.6 (back), or 0 for background. Rows are flipped so +y is up.

Public API:
  VoxelObject, generate_object(seed, grid=24, category="chair"), rotate_object(obj, R)
  render_view(obj, pose, size) -> (image [3,S,S], segment [1,S,S])
  build_dataset(n_objects, poses, size, seed, out_dir, categories=("chair",)) -> Dataset
  Dataset.open(root), Dataset.refs(split), Dataset.load_batch(refs, step)
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import data_paths
from geometry import REFERENCE_POSE, Pose, rotate_volume, rotation_between
from image_io import DataPathError, load_image, load_segment, save_ppm
from losses import edge_map
from models import CATEGORIES, MANIFEST_COLUMNS, SPLITS
from tensor_core import Tensor, derive_seed, get_dtype, make_rng

logger = logging.getLogger(__name__)

DEFAULT_GRID = 24
MIN_OCCUPANCY = 0.01
MAX_OCCUPANCY = 0.6
TRAIN_FRACTION = 0.8
SHADE_BACK = 0.6

AccessHook = Callable[[Optional[int], Sequence["ViewRef"]], None]


class DatasetError(ValueError):
    """Raised for invalid dataset parameters, manifests or lookups."""


# ---------------------------------------------------------------------------
# Objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelObject:
    occupancy: np.ndarray  # bool [D, D, D], axes (z, y, x)
    color: np.ndarray      # float [3, D, D, D], zero where unoccupied
    object_id: str = ""
    seed: int = 0
    category: str = "chair"

    @property
    def grid(self) -> int:
        return self.occupancy.shape[0]

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())


def _chair_boxes(rng: np.random.Generator, g: int) -> list[tuple[int, int, int, int, int, int]]:
    """Boxes as (z0, z1, y0, y1, x0, x1), half-open, inside the central 20-80%."""
    lo, hi = int(0.2 * g), int(np.ceil(0.8 * g))
    t = max(1, g // 12)
    span = hi - lo
    x0 = lo + int(rng.integers(0, max(1, span // 6)))
    x1 = hi - int(rng.integers(0, max(1, span // 6)))
    z0 = lo + int(rng.integers(0, max(1, span // 6)))
    z1 = hi - int(rng.integers(0, max(1, span // 6)))
    seat_y = lo + int(rng.integers(span // 4, max(span // 4 + 1, span // 2)))

    boxes = [(z0, z1, seat_y, seat_y + t, x0, x1)]
    shift = int(rng.integers(-t, t + 1))
    boxes.append((z0, z0 + t, seat_y + t, hi, max(lo, x0 + shift), min(hi, x1 + shift)))
    if rng.random() < 0.9:
        arm_h = max(1, (hi - seat_y - t) // 3)
        left = rng.random() < 0.5
        ax0, ax1 = (x0, x0 + t) if left else (x1 - t, x1)
        boxes.append((z0, z1, seat_y + t, min(hi, seat_y + t + arm_h), ax0, ax1))
    for leg in range(int(rng.integers(0, 3))):
        lx0, lx1 = (x0, x0 + t) if leg == 0 else (x1 - t, x1)
        boxes.append((z0, z1, lo, seat_y, lx0, lx1))
    return boxes


def _car_boxes(rng: np.random.Generator, g: int) -> list[tuple[int, int, int, int, int, int]]:
    """Body, cabin set back from the front, four wheels and an optional rear spoiler."""
    lo, hi = int(0.2 * g), int(np.ceil(0.8 * g))
    t = max(1, g // 12)
    span = hi - lo
    x0 = lo + int(rng.integers(0, max(1, span // 8)))
    x1 = hi - int(rng.integers(0, max(1, span // 8)))
    half = max(t + 1, span // 4 + int(rng.integers(0, max(1, span // 8))))
    mid = (lo + hi) // 2
    z0, z1 = max(lo, mid - half), min(hi, mid + half)
    body_y0 = lo + t
    body_y1 = min(hi - t, body_y0 + max(t + 1, span // 4))

    boxes = [(z0, z1, body_y0, body_y1, x0, x1)]
    length = x1 - x0
    cab_len = max(t + 1, length // 2 - int(rng.integers(0, max(1, length // 6))))
    cab_x0 = x0 + int(rng.integers(0, max(1, length // 4)))
    cab_x1 = min(x1 - t, cab_x0 + cab_len)
    inset = t if z1 - z0 > 2 * t + 1 else 0
    boxes.append((z0 + inset, z1 - inset, body_y1, min(hi, body_y1 + max(t, span // 5)), cab_x0, cab_x1))
    for wx in (x0, x1 - t):
        for wz in (z0, z1 - t):
            boxes.append((wz, wz + t, lo, body_y0, wx, wx + t))
    if rng.random() < 0.5:
        boxes.append((z0, z1, body_y1, min(hi, body_y1 + t), x0, x0 + t))
    return boxes


_BOX_LAYOUTS = {"chair": _chair_boxes, "car": _car_boxes}


def generate_object(seed: int, grid: int = DEFAULT_GRID, object_id: str = "",
                    category: str = "chair") -> VoxelObject:
    """A union of colored boxes laid out as a chair or a car; deterministic per (seed, category)."""
    if grid < 8:
        raise DatasetError(f"object grid must be >= 8 (got {grid})")
    if category not in _BOX_LAYOUTS:
        raise DatasetError(f"unknown category {category!r} (expected one of {CATEGORIES})")
    layout = _BOX_LAYOUTS[category]
    rng = make_rng(seed)
    for _ in range(100):
        occupancy = np.zeros((grid,) * 3, dtype=bool)
        color = np.zeros((3,) + (grid,) * 3)
        for z0, z1, y0, y1, x0, x1 in layout(rng, grid):
            rgb = rng.uniform(0.2, 1.0, size=3)
            occupancy[z0:z1, y0:y1, x0:x1] = True
            color[:, z0:z1, y0:y1, x0:x1] = rgb[:, None, None, None]
        fraction = occupancy.mean()
        if MIN_OCCUPANCY <= fraction <= MAX_OCCUPANCY:
            return VoxelObject(occupancy, color, object_id=object_id, seed=int(seed), category=category)
    raise DatasetError(f"could not generate an object within the occupancy bounds (seed={seed})")


def rotate_object(obj: VoxelObject, R: np.ndarray) -> VoxelObject:
    """Nearest-neighbour rotation of occupancy and color together."""
    stacked = np.concatenate([obj.occupancy[None].astype(np.float64), obj.color])
    rotated = rotate_volume(Tensor(stacked[None], dtype=np.float64), R, "nearest").data[0]
    occupancy = rotated[0] > 0.5
    color = np.where(occupancy[None], rotated[1:], 0.0)
    return VoxelObject(occupancy, color, object_id=obj.object_id, seed=obj.seed, category=obj.category)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _project(obj: VoxelObject) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back traversal along z. Returns color [3, D, D] and silhouette [D, D]."""
    d = obj.grid
    occ = obj.occupancy[::-1]            # k = 0 is the front slice
    color = obj.color[:, ::-1]
    hit = occ.any(axis=0)
    first = np.argmax(occ, axis=0)
    shade = 1.0 - (1.0 - SHADE_BACK) * first / max(d - 1, 1)
    ys, xs = np.indices((d, d))
    image = color[:, first, ys, xs] * shade
    image = np.where(hit[None], image, 0.0)
    return image[:, ::-1], hit[::-1]     # flip rows so +y is up


def render_view(obj: VoxelObject, pose: Pose, size: int) -> tuple[np.ndarray, np.ndarray]:
    if size < 16:
        raise DatasetError(f"render size must be >= 16 (got {size})")
    posed = obj if pose == REFERENCE_POSE else rotate_object(obj, rotation_between(REFERENCE_POSE, pose))
    image, silhouette = _project(posed)
    idx = np.floor((np.arange(size) + 0.5) * obj.grid / size).astype(np.int64)
    image = image[:, idx][:, :, idx]
    silhouette = silhouette[idx][:, idx].astype(np.float64)
    segment = edge_map(Tensor(silhouette[None, None], dtype=np.float64)).data[0]
    return image, segment


# ---------------------------------------------------------------------------
# Dataset on disk
# ---------------------------------------------------------------------------

def _format_angle(value: float) -> str:
    return f"{value:g}"


def _split_ids(object_ids: Sequence[str], seed: int, key: int = 0) -> dict[str, str]:
    """80/20 split of one category's objects; both sides get at least one."""
    n = len(object_ids)
    n_train = min(n - 1, max(1, int(round(TRAIN_FRACTION * n))))
    order = make_rng(derive_seed(seed, 0x5EED, key)).permutation(n)
    train = {object_ids[i] for i in order[:n_train]}
    return {oid: ("train" if oid in train else "test") for oid in object_ids}


def build_dataset(n_objects: int, poses: Sequence[Pose], size: int, seed: int,
                  out_dir: str | Path, grid: int = DEFAULT_GRID, workers: int = 1,
                  progress: bool = False, categories: Sequence[str] = ("chair",)) -> "Dataset":
    """Render every object at every pose and write views, segments and manifest.

    Object i belongs to categories[i % len(categories)]; each category is
    split into train and test on its own.
    """
    categories = list(dict.fromkeys(categories))
    if not categories:
        raise DatasetError("a dataset needs at least one category")
    unknown = [c for c in categories if c not in CATEGORIES]
    if unknown:
        raise DatasetError(f"unknown categories {unknown} (expected some of {CATEGORIES})")
    min_objects = max(5, 2 * len(categories))
    if n_objects < min_objects:
        raise DatasetError(f"a {len(categories)}-category dataset needs at least {min_objects} objects "
                           f"(got {n_objects})")
    if not poses:
        raise DatasetError("a dataset needs at least one pose")
    out_dir = Path(out_dir)
    object_ids = [f"obj{i:04d}" for i in range(n_objects)]
    category_of = {oid: categories[i % len(categories)] for i, oid in enumerate(object_ids)}
    splits: dict[str, str] = {}
    for key, category in enumerate(categories):
        splits.update(_split_ids([oid for oid in object_ids if category_of[oid] == category], seed, key))

    def render_object(index: int) -> list[tuple[str, Pose, np.ndarray, np.ndarray]]:
        oid = object_ids[index]
        obj = generate_object(derive_seed(seed, index), grid, oid, category_of[oid])
        return [(obj.object_id, pose, *render_view(obj, pose, size)) for pose in poses]

    rows = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            rendered = pool.map(render_object, range(n_objects))
            for views in tqdm(rendered, total=n_objects, desc="render", disable=not progress):
                for object_id, pose, image, segment in views:
                    rel = data_paths.view_relpath(object_id, pose.label)
                    save_ppm(image, out_dir / rel)
                    save_ppm(segment, out_dir / data_paths.seg_relpath_for_view(rel))
                    rows.append({
                        "object_id": object_id,
                        "category": category_of[object_id],
                        "azimuth": _format_angle(pose.azimuth),
                        "elevation": _format_angle(pose.elevation),
                        "split": splits[object_id],
                        "relative_path": rel,
                    })
        manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
        manifest.to_csv(data_paths.manifest_path(out_dir), sep="\t", index=False, lineterminator="\n")
    except OSError as exc:
        raise DatasetError(f"failed to write dataset under {out_dir}: {exc}") from exc

    n_train = sum(1 for s in splits.values() if s == "train")
    logger.info(
        "Built dataset %s: %d objects (%s; %d train / %d test), %d poses, %d views",
        out_dir, n_objects, "+".join(categories), n_train, n_objects - n_train, len(poses), len(rows),
    )
    return Dataset.open(out_dir)


@dataclass(frozen=True)
class ViewRef:
    object_id: str
    pose: Pose
    split: str
    relative_path: str
    category: str = "chair"


@dataclass
class Batch:
    images: Tensor
    segments: Tensor
    poses: list[Pose]
    object_ids: list[str]


@dataclass
class Dataset:
    root: Path
    manifest: pd.DataFrame
    access_hooks: list[AccessHook] = field(default_factory=list)
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        path = data_paths.manifest_path(root)
        if not path.is_file():
            raise DataPathError(f"dataset manifest not found: {path}")
        manifest = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
        missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
        if missing:
            raise DatasetError(f"{path}: missing manifest columns {missing}")
        bad = sorted(set(manifest["split"]) - set(SPLITS))
        if bad:
            raise DatasetError(f"{path}: unknown split values {bad}")
        bad = sorted(set(manifest["category"]) - set(CATEGORIES))
        if bad:
            raise DatasetError(f"{path}: unknown category values {bad}")
        return cls(root=root, manifest=manifest)

    # -- lookups -----------------------------------------------------------

    def refs(self, split: Optional[str] = None) -> list[ViewRef]:
        frame = self.manifest if split is None else self.manifest[self.manifest["split"] == split]
        return [
            ViewRef(r.object_id, Pose(float(r.azimuth), float(r.elevation)), r.split, r.relative_path, r.category)
            for r in frame.itertuples(index=False)
        ]

    def object_ids(self, split: Optional[str] = None, category: Optional[str] = None) -> list[str]:
        frame = self.manifest if split is None else self.manifest[self.manifest["split"] == split]
        if category is not None:
            frame = frame[frame["category"] == category]
        return sorted(frame["object_id"].unique())

    def categories(self) -> list[str]:
        """Categories present, in CATEGORIES order."""
        present = set(self.manifest["category"])
        return [c for c in CATEGORIES if c in present]

    def category_of(self, object_id: str) -> str:
        return self.views_of(object_id)[0].category

    @property
    def poses(self) -> list[Pose]:
        """The pose vocabulary in manifest order."""
        seen: dict[Pose, None] = {}
        for az, el in zip(self.manifest["azimuth"], self.manifest["elevation"]):
            seen.setdefault(Pose(float(az), float(el)), None)
        return list(seen)

    def views_of(self, object_id: str) -> list[ViewRef]:
        refs = [ref for ref in self.refs() if ref.object_id == object_id]
        if not refs:
            raise DatasetError(f"object {object_id!r} is not in the dataset")
        return refs

    def view(self, object_id: str, pose: Pose) -> ViewRef:
        for ref in self.views_of(object_id):
            if ref.pose == pose:
                return ref
        raise DatasetError(f"object {object_id!r} has no view at pose {pose}")

    @property
    def image_size(self) -> int:
        first = self.refs()[0]
        return int(self.load_view(first).shape[-1])

    # -- pixels ------------------------------------------------------------

    def load_view(self, ref: ViewRef) -> np.ndarray:
        key = ref.relative_path
        if key not in self._cache:
            self._cache[key] = load_image(self.root / ref.relative_path)
        return self._cache[key]

    def load_segment(self, ref: ViewRef) -> np.ndarray:
        key = data_paths.seg_relpath_for_view(ref.relative_path)
        if key not in self._cache:
            self._cache[key] = load_segment(self.root / key)
        return self._cache[key]

    def load_batch(self, refs: Sequence[ViewRef], step: Optional[int] = None) -> Batch:
        """Stack views and segments; every registered access hook sees the refs."""
        for hook in self.access_hooks:
            hook(step, refs)
        dtype = get_dtype()
        images = np.stack([self.load_view(r) for r in refs]).astype(dtype)
        segments = np.stack([self.load_segment(r) for r in refs]).astype(dtype)
        return Batch(
            images=Tensor(images, dtype=dtype),
            segments=Tensor(segments, dtype=dtype),
            poses=[r.pose for r in refs],
            object_ids=[r.object_id for r in refs],
        )

    def add_access_hook(self, hook: AccessHook) -> None:
        self.access_hooks.append(hook)


def iter_objects(dataset: Dataset, split: Optional[str] = None,
                 category: Optional[str] = None) -> Iterable[tuple[str, list[ViewRef]]]:
    """(object id, its views) for every object of `split` and `category`, sorted by id."""
    for object_id in dataset.object_ids(split, category):
        yield object_id, dataset.views_of(object_id)
