# models.py — column schemas of every TSV the repo reads or writes.

MANIFEST_COLUMNS = [
    "object_id",
    "category",
    "azimuth",
    "elevation",
    "split",
    "relative_path",
]

SPLITS = ("train", "test")
CATEGORIES = ("chair", "car")

# Loss log (append-only, one row per optimization step)
LOSS_COLUMNS = [
    "L_R",
    "L_SSIM",
    "L_V",
    "L_S",
    "L_A",
    "L_Total",
]
LOSS_LOG_COLUMNS = ["step"] + LOSS_COLUMNS

# In-memory training history also carries the critic loss and the stage
HISTORY_COLUMNS = ["stage", "step"] + LOSS_COLUMNS + ["L_D"]

# Evaluation report, one row per (object, source pose, target pose)
REPORT_COLUMNS = [
    "object",
    "category",
    "src_az",
    "src_el",
    "tgt_az",
    "tgt_el",
    "L1",
    "SSIM",
    # copy-source baseline: L1 between the target view and the input view itself
    "copy_L1",
]

SWEEP_COLUMNS = ["ref_az", "ref_el", "L1", "SSIM"]

# Per-category summary of an evaluation report
CATEGORY_COLUMNS = ["category", "rows", "L1", "SSIM", "copy_L1", "beats_copy"]

ABLATION_COLUMNS = ["variant", "L1", "SSIM", "beats_copy"]

PROBE_COLUMNS = [
    "object",
    "views",
    "mean_intra_distance",
    "mean_inter_distance",
    "ratio",
]
