"""
data_paths.py — central file-path registry.

Every default location the CLI and library write to is derived from one
configurable root directory. Reads `VIEWSYNTH_DATA_DIR` from the
environment; defaults to `./data` relative to the working directory:

  export VIEWSYNTH_DATA_DIR=/scratch/viewsynth

Layout
------
    $VIEWSYNTH_DATA_DIR/
        datasets/       generated datasets (one directory each)
            procedural/     default target of `gen-data`
        runs/           one directory per training run
            <name>/
                run.cfg             config snapshot
                stage1.ckpt         checkpoints (binary, see persistence.py)
                stage2.ckpt
                loss_stage1.tsv     append-only loss logs
                loss_stage2.tsv
        reports/        evaluation / sweep / ablation tables, PDFs, mosaics

Dataset layout (inside any dataset directory)
---------------------------------------------
    manifest.tsv
    views/<object_id>/<azimuth>_<elevation>.ppm
    segs/<object_id>/<azimuth>_<elevation>.ppm

Importing this module is safe at any time: it never calls `mkdir`
(use `ensure_dirs()` for that).
"""

import os
from pathlib import Path


# ---------------------------------------------------------------------------
# Root
# ---------------------------------------------------------------------------

DATA_DIR: Path = Path(os.environ.get("VIEWSYNTH_DATA_DIR", "data")).resolve()


# ---------------------------------------------------------------------------
# Subdirectories (all created on demand by ensure_dirs())
# ---------------------------------------------------------------------------

DATASETS_DIR: Path = DATA_DIR / "datasets"
DEFAULT_DATASET_DIR: Path = DATASETS_DIR / "procedural"
RUNS_DIR: Path = DATA_DIR / "runs"
REPORTS_DIR: Path = DATA_DIR / "reports"


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
VIEWS_DIRNAME = "views"
SEGS_DIRNAME = "segs"


def manifest_path(dataset_dir: Path) -> Path:
    return Path(dataset_dir) / MANIFEST_NAME


def view_relpath(object_id: str, pose_label: str) -> str:
    """Manifest-relative path of a rendered view (always '/'-separated)."""
    return f"{VIEWS_DIRNAME}/{object_id}/{pose_label}.ppm"


def seg_relpath_for_view(view_relpath_: str) -> str:
    """The segment map stored alongside a view."""
    head, _, tail = view_relpath_.partition("/")
    if head != VIEWS_DIRNAME:
        raise ValueError(f"not a view path: {view_relpath_!r}")
    return f"{SEGS_DIRNAME}/{tail}"


# ---------------------------------------------------------------------------
# Run layout
# ---------------------------------------------------------------------------

def run_dir(name: str) -> Path:
    return RUNS_DIR / name


def run_config_path(directory: Path) -> Path:
    return Path(directory) / "run.cfg"


def checkpoint_path(directory: Path, stage: int) -> Path:
    return Path(directory) / f"stage{stage}.ckpt"


def loss_log_path(directory: Path, stage: int) -> Path:
    return Path(directory) / f"loss_stage{stage}.tsv"


# ---------------------------------------------------------------------------
# ensure_dirs
# ---------------------------------------------------------------------------

def ensure_dirs() -> None:
    """Create DATA_DIR and its standard subdirectories. Idempotent."""
    for d in (DATA_DIR, DATASETS_DIR, RUNS_DIR, REPORTS_DIR):
        d.mkdir(parents=True, exist_ok=True)
