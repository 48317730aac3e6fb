"""
audit_log.py — append-only training logs.

Two records are kept while training:

  LossLog          one TSV row per optimization step:
                     step  L_R  L_SSIM  L_V  L_S  L_A  L_Total
                   The header is written once when the file is created;
                   later runs (resume) first cut the log back to the
                   resume step, then append.

  DataAccessAudit  an in-memory record of which (object, pose) views each
                   step loaded. `check_single_view()` raises when one step
                   loaded two distinct real views of the same object, the
                   property unsupervised training relies on. Attach it with
                   `dataset.add_access_hook(audit)`.

Failure policy: a loss-log write failure is logged and re-raised. A run
whose curve cannot be recorded should stop, not continue silently.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Optional, Sequence

import pandas as pd

from models import LOSS_COLUMNS, LOSS_LOG_COLUMNS

logger = logging.getLogger(__name__)


class SingleViewViolation(AssertionError):
    """Raised when one step consumed two real views of the same object."""


# ---------------------------------------------------------------------------
# Loss log
# ---------------------------------------------------------------------------

class LossLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, step: int, losses: Mapping[str, float]) -> None:
        """Append one row; `losses` must hold every column of LOSS_COLUMNS."""
        values = [repr(float(losses[c])) for c in LOSS_COLUMNS]
        line = "\t".join([str(int(step))] + values) + "\n"
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                if new:
                    fh.write("\t".join(LOSS_LOG_COLUMNS) + "\n")
                fh.write(line)
        except OSError as exc:
            logger.error("loss log write failed (%s): %s", self.path, exc)
            raise

    def truncate(self, step: int) -> int:
        """Drop rows for `step` and later; returns how many were dropped.

        A resumed run restarts at its checkpoint's step, so rows an
        interrupted run wrote past that point would otherwise repeat.
        """
        if not self.path.exists():
            return 0
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines(keepends=True)
            header, body = lines[:1], lines[1:]
            kept = [line for line in body if int(line.split("\t", 1)[0]) < step]
            dropped = len(body) - len(kept)
            if dropped:
                tmp = self.path.with_name(self.path.name + ".tmp")
                tmp.write_text("".join(header + kept), encoding="utf-8", newline="\n")
                tmp.replace(self.path)
                logger.info("Dropped %d loss-log rows at step >= %d from %s", dropped, step, self.path)
        except OSError as exc:
            logger.error("loss log rewrite failed (%s): %s", self.path, exc)
            raise
        return dropped

    def read(self) -> pd.DataFrame:
        return read_loss_log(self.path)


def read_loss_log(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        return pd.DataFrame(columns=LOSS_LOG_COLUMNS)
    frame = pd.read_csv(path, sep="\t")
    return frame[LOSS_LOG_COLUMNS]


# ---------------------------------------------------------------------------
# Data-access audit
# ---------------------------------------------------------------------------

class DataAccessAudit:
    """Access hook recording (step, object_id, pose) for every loaded view."""

    def __init__(self) -> None:
        self.records: list[tuple[Optional[int], str, object]] = []

    def __call__(self, step: Optional[int], refs: Sequence) -> None:
        for ref in refs:
            self.records.append((step, ref.object_id, ref.pose))

    def views_per_step(self) -> dict[Optional[int], dict[str, set]]:
        table: dict[Optional[int], dict[str, set]] = defaultdict(lambda: defaultdict(set))
        for step, object_id, pose in self.records:
            table[step][object_id].add(pose)
        return table

    def check_single_view(self) -> None:
        for step, objects in self.views_per_step().items():
            if step is None:
                continue
            for object_id, poses in objects.items():
                if len(poses) > 1:
                    raise SingleViewViolation(
                        f"step {step} loaded {len(poses)} distinct views of {object_id}"
                    )

    def steps(self) -> list[int]:
        return sorted({s for s, _, _ in self.records if s is not None})
