"""
geometry.py — poses, rotation matrices and the differentiable volume resampler.

Conventions (fixed here, relied on by the renderer and the model):
  - right-handed world, y axis up; a pose's world rotation is
    R_y(azimuth) @ R_x(elevation)
  - a volume [N, C, D, H, W] indexes (z, y, x); voxel centres sit at
    (i + 0.5) / n * 2 - 1 in normalized [-1, 1] coordinates
  - rotate_volume samples the input at R^T o for every output centre o,
    zero outside the cube

Rotations by multiples of 90 degrees use exact 0 / ±1 entries, and sample
positions within 1e-9 of a voxel centre snap onto it, so identity and
axis-aligned rotations move voxel values without interpolation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from tensor_core import Function, Tensor

_SNAP = 1e-9


class PoseError(ValueError):
    """Raised for azimuth/elevation values outside the valid ranges."""


class VolumeShapeError(ValueError):
    """Raised when a volume is not [N, C, D, D, D]."""


class RotationError(ValueError):
    """Raised when a matrix is not a proper rotation."""


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    azimuth: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        az, el = float(self.azimuth), float(self.elevation)
        if not (math.isfinite(az) and math.isfinite(el)):
            raise PoseError(f"pose angles must be finite (got {az}, {el})")
        if not -90.0 <= el <= 90.0:
            raise PoseError(f"elevation {el} is outside [-90, 90]")
        az = az % 360.0
        if az >= 360.0:
            az -= 360.0
        object.__setattr__(self, "azimuth", az + 0.0)
        object.__setattr__(self, "elevation", el + 0.0)

    @property
    def label(self) -> str:
        """File-name form `<azimuth>_<elevation>`, e.g. `20_10`."""
        return f"{self.azimuth:g}_{self.elevation:g}"

    @classmethod
    def parse(cls, text: str) -> "Pose":
        """Parse `az,el` (also accepts `az:el` and `az_el`)."""
        for sep in (",", ":", "_"):
            if sep in text:
                az, el = text.split(sep, 1)
                try:
                    return cls(float(az), float(el))
                except ValueError:
                    break
        raise PoseError(f"cannot parse pose {text!r} (expected 'azimuth,elevation')")

    def __str__(self) -> str:
        return f"({self.azimuth:g}, {self.elevation:g})"


REFERENCE_POSE = Pose(0.0, 0.0)


def pose_grid(n_azimuth: int, elevations: Sequence[float]) -> list[Pose]:
    """Azimuths 0, 360/n, ... crossed with elevations, azimuth-major."""
    if n_azimuth < 1:
        raise PoseError(f"n_azimuth must be >= 1 (got {n_azimuth})")
    step = 360.0 / n_azimuth
    return [Pose(i * step, el) for i in range(n_azimuth) for el in elevations]


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _cos_sin(degrees: float) -> tuple[float, float]:
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def rotation_y(degrees: float) -> np.ndarray:
    c, s = _cos_sin(degrees)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(degrees: float) -> np.ndarray:
    c, s = _cos_sin(degrees)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def world_rotation(pose: Pose) -> np.ndarray:
    return rotation_y(pose.azimuth) @ rotation_x(pose.elevation)


def rotation_between(source: Pose, target: Pose) -> np.ndarray:
    """R = W(target) · W(source)^-1; composes like a group."""
    return world_rotation(target) @ world_rotation(source).T


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise RotationError(f"rotation must be 3x3, got shape {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0):
        raise RotationError("matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise RotationError(f"determinant {np.linalg.det(R):.6f} is not +1")


# ---------------------------------------------------------------------------
# Volume resampling
# ---------------------------------------------------------------------------

def _voxel_centres(n: int) -> np.ndarray:
    """[n^3, 3] (x, y, z) centres in (z, y, x) flat order."""
    c = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def _sample_table(R: np.ndarray, n: int, interp: str) -> tuple[np.ndarray, np.ndarray]:
    """Flat source indices and weights, each [K, n^3] (K = 8 or 1)."""
    source = _voxel_centres(n) @ R  # rows are (R^T o)^T
    f = (source + 1.0) * n / 2.0 - 0.5  # continuous (x, y, z) index
    nearest = np.round(f)
    f = np.where(np.abs(f - nearest) < _SNAP, nearest, f)

    if interp == "nearest":
        idx = np.floor(f + 0.5).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < n), axis=1)
        idx = np.clip(idx, 0, n - 1)
        flat = (idx[:, 2] * n + idx[:, 1]) * n + idx[:, 0]
        return flat[None, :], valid[None, :].astype(np.float64)

    base = np.floor(f).astype(np.int64)
    frac = f - base
    indices, weights = [], []
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                corner = base + np.array([dx, dy, dz])
                w = (
                    (frac[:, 0] if dx else 1.0 - frac[:, 0])
                    * (frac[:, 1] if dy else 1.0 - frac[:, 1])
                    * (frac[:, 2] if dz else 1.0 - frac[:, 2])
                )
                valid = np.all((corner >= 0) & (corner < n), axis=1)
                corner = np.clip(corner, 0, n - 1)
                indices.append((corner[:, 2] * n + corner[:, 1]) * n + corner[:, 0])
                weights.append(np.where(valid, w, 0.0))
    return np.stack(indices), np.stack(weights)


class RotateVolume(Function):
    def forward(self, vol, tables=()):
        n_batch, channels = vol.shape[:2]
        flat = vol.reshape(n_batch, channels, -1)
        self.tables, self.vol_shape = tables, vol.shape
        out = np.zeros_like(flat)
        for b, (idx, w) in enumerate(tables):
            w = w.astype(vol.dtype, copy=False)
            for k in range(idx.shape[0]):
                out[b] += flat[b][:, idx[k]] * w[k]
        return out.reshape(vol.shape)

    def backward(self, grad):
        n_batch, channels = self.vol_shape[:2]
        grad_flat = grad.reshape(n_batch, channels, -1)
        out = np.zeros_like(grad_flat)
        for b, (idx, w) in enumerate(self.tables):
            w = w.astype(grad.dtype, copy=False)
            for k in range(idx.shape[0]):
                np.add.at(out[b], (slice(None), idx[k]), grad_flat[b] * w[k])
        return (out.reshape(self.vol_shape),)


def rotate_volume(vol: Tensor, R: Union[np.ndarray, Sequence[np.ndarray]],
                  interp: str = "trilinear") -> Tensor:
    """Rotate a cubic volume about its centre.

    `R` is one 3x3 rotation for the whole batch or one per sample
    ([N, 3, 3]). Trilinear mode is differentiable w.r.t. `vol`; gradients
    scatter with the same weights used to gather.
    """
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if vol.ndim != 5 or not (vol.shape[2] == vol.shape[3] == vol.shape[4]):
        raise VolumeShapeError(f"expected a cubic [N, C, D, D, D] volume, got shape {vol.shape}")
    n = vol.shape[2]
    mats = np.asarray(R, dtype=np.float64)
    if mats.ndim == 2:
        check_rotation(mats)
        table = _sample_table(mats, n, interp)
        tables = [table] * vol.shape[0]
    else:
        if mats.shape[0] != vol.shape[0]:
            raise RotationError(f"{mats.shape[0]} rotations for a batch of {vol.shape[0]}")
        cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        tables = []
        for m in mats:
            check_rotation(m)
            key = m.tobytes()
            if key not in cache:
                cache[key] = _sample_table(m, n, interp)
            tables.append(cache[key])
    return RotateVolume.apply(vol, tables=tuple(tables))
