"""Voxel grids, landmarks, Gaussian weight fields, and ROI masks.

All distances are computed in millimeters (physical space), never in voxel
indices, so anisotropic spacing is honored. Weight fields are peak
normalized: the voxel nearest the landmark carries exactly 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ExtentMismatchError,
    InvalidLandmarkError,
    InvalidParameterError,
    ShapeError,
)

LEVELS = ("L1-2", "L2-3", "L3-4", "L4-5", "L5-S1")
PATHOLOGIES = ("dh", "ccs")
SEVERITIES = {"dh": ("small", "mod_large"), "ccs": ("moderate", "severe")}

_EXTENT_TOL = 1e-6


@dataclass(frozen=True)
class VolumeGrid:
    """Shape/spacing/origin metadata mapping voxel indices to mm coordinates.

    ``origin`` is the mm position of the center of voxel (0, ..., 0); the
    center of voxel ``i`` is ``origin + i * spacing``.
    """

    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    origin: tuple[float, ...] = ()

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin) if self.origin else (0.0,) * len(shape)
        if len(spacing) != len(shape) or len(origin) != len(shape):
            raise InvalidParameterError("shape, spacing, and origin must have equal length")
        if any(s < 1 for s in shape):
            raise InvalidParameterError(f"all shape entries must be >= 1, got {shape}")
        if any(s <= 0 for s in spacing):
            raise InvalidParameterError(f"all spacing entries must be > 0, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def voxel_center(self, index) -> np.ndarray:
        """mm coordinates of the center of the voxel at ``index``."""
        return np.asarray(self.origin) + np.asarray(index) * np.asarray(self.spacing)

    def axis_centers(self) -> list[np.ndarray]:
        """Per-axis 1-D arrays of voxel-center coordinates (open mesh)."""
        return [
            self.origin[a] + np.arange(self.shape[a]) * self.spacing[a]
            for a in range(self.ndim)
        ]

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) mm bounds of the grid, including the half-voxel margins."""
        origin = np.asarray(self.origin)
        spacing = np.asarray(self.spacing)
        shape = np.asarray(self.shape)
        lo = origin - spacing / 2.0
        hi = origin + (shape - 0.5) * spacing
        return lo, hi

    def contains(self, position_mm) -> bool:
        lo, hi = self.extent()
        p = np.asarray(position_mm, dtype=float)
        if p.shape != (self.ndim,):
            raise ShapeError(f"position must have {self.ndim} coordinates, got {p.shape}")
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def nearest_voxel(self, position_mm) -> tuple[int, ...]:
        """Index of the voxel whose center is closest to ``position_mm``."""
        p = np.asarray(position_mm, dtype=float)
        idx = np.rint((p - np.asarray(self.origin)) / np.asarray(self.spacing)).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def downsample(self, factors) -> "VolumeGrid":
        """Coarser grid covering the same physical extent.

        Each axis shape must be divisible by its factor; the coarse voxel
        center sits at the mean of the fine centers it replaces.
        """
        f = np.atleast_1d(np.asarray(factors, dtype=int))
        if f.size == 1:
            f = np.full(self.ndim, int(f[0]))
        if f.size != self.ndim:
            raise InvalidParameterError("one downsampling factor per axis required")
        if np.any(f < 1):
            raise InvalidParameterError(f"factors must be >= 1, got {tuple(f)}")
        shape = np.asarray(self.shape)
        if np.any(shape % f != 0):
            raise InvalidParameterError(f"shape {self.shape} not divisible by factors {tuple(f)}")
        spacing = np.asarray(self.spacing) * f
        origin = np.asarray(self.origin) + (f - 1) / 2.0 * np.asarray(self.spacing)
        return VolumeGrid(tuple(shape // f), tuple(spacing), tuple(origin))

    def same_extent(self, other: "VolumeGrid", tol: float = _EXTENT_TOL) -> bool:
        lo_a, hi_a = self.extent()
        lo_b, hi_b = other.extent()
        return self.ndim == other.ndim and bool(
            np.all(np.abs(lo_a - lo_b) <= tol) and np.all(np.abs(hi_a - hi_b) <= tol)
        )

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "spacing": list(self.spacing),
                "origin": list(self.origin)}

    @staticmethod
    def from_dict(d: dict) -> "VolumeGrid":
        return VolumeGrid(tuple(d["shape"]), tuple(d["spacing"]), tuple(d["origin"]))


@dataclass(frozen=True)
class Landmark:
    """Annotated pathology point: mm position plus conditioning labels."""

    position_mm: tuple[float, ...]
    level: str
    pathology: str
    severity: str

    def __post_init__(self):
        object.__setattr__(self, "position_mm", tuple(float(p) for p in self.position_mm))
        if self.level not in LEVELS:
            raise InvalidParameterError(f"unknown level {self.level!r}; expected one of {LEVELS}")
        if self.pathology not in PATHOLOGIES:
            raise InvalidParameterError(
                f"unknown pathology {self.pathology!r}; expected one of {PATHOLOGIES}"
            )
        if self.severity not in SEVERITIES[self.pathology]:
            raise InvalidParameterError(
                f"unknown severity {self.severity!r} for {self.pathology}; "
                f"expected one of {SEVERITIES[self.pathology]}"
            )

    def to_record(self) -> dict:
        return {
            "position_mm": list(self.position_mm),
            "level": self.level,
            "pathology": self.pathology,
            "severity": self.severity,
        }

    @staticmethod
    def from_record(rec: dict) -> "Landmark":
        return Landmark(
            tuple(rec["position_mm"]), rec["level"], rec["pathology"], rec["severity"]
        )


@dataclass(frozen=True)
class WeightField:
    """Per-voxel weights in [0, 1] on a grid."""

    grid: VolumeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ShapeError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InvalidParameterError("weight values must lie in [0, 1]")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel {0, 1} mask on a grid."""

    grid: VolumeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.shape != self.grid.shape:
            raise ShapeError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        values = (values != 0).astype(np.uint8)
        object.__setattr__(self, "values", values)

    @property
    def num_voxels(self) -> int:
        return int(self.values.sum())


def _squared_distance_mm(grid: VolumeGrid, position_mm) -> np.ndarray:
    d2 = np.zeros(grid.shape, dtype=np.float64)
    for axis, centers in enumerate(grid.axis_centers()):
        delta = centers - float(position_mm[axis])
        shape = [1] * grid.ndim
        shape[axis] = -1
        d2 = d2 + (delta**2).reshape(shape)
    return d2


def gaussian_weight_field(grid: VolumeGrid, landmark, sigma_mm: float) -> WeightField:
    """Isotropic Gaussian weights around a landmark, peak normalized on-grid.

    Raw weights are exp(-||c_v - mu||^2 / (2 sigma^2)) over voxel centers
    c_v in mm; the field is divided by its on-grid maximum so the voxel
    nearest mu carries exactly 1.0 (value ratios, and hence mm-isotropy
    around mu, are preserved).
    """
    if sigma_mm <= 0:
        raise InvalidParameterError(f"sigma_mm must be > 0, got {sigma_mm}")
    position = landmark.position_mm if isinstance(landmark, Landmark) else tuple(landmark)
    if len(position) != grid.ndim:
        raise ShapeError(f"landmark has {len(position)} coordinates for a {grid.ndim}-D grid")
    if not grid.contains(position):
        raise InvalidLandmarkError(f"landmark {position} outside grid extent {grid.extent()}")
    d2 = _squared_distance_mm(grid, position)
    raw = np.exp(-d2 / (2.0 * float(sigma_mm) ** 2))
    return WeightField(grid, raw / raw.max())


def threshold_mask(w: WeightField, tau: float = 0.1) -> BinaryMask:
    """ROI mask where the weight strictly exceeds ``tau``."""
    if not 0.0 < tau < 1.0:
        raise InvalidParameterError(f"tau must lie in (0, 1), got {tau}")
    return BinaryMask(w.grid, w.values > tau)


def resample_weights(landmark, sigma_mm: float, source_grid: VolumeGrid,
                     target_grid: VolumeGrid) -> WeightField:
    """Weight field re-evaluated analytically at the target grid's voxel centers.

    The target grid must cover the same physical extent as the source grid
    (the weights are a function of mm space, so they are recomputed from the
    landmark, never averaged from source-grid samples).
    """
    if not source_grid.same_extent(target_grid):
        raise ExtentMismatchError(
            f"target extent {target_grid.extent()} != source extent {source_grid.extent()}"
        )
    return gaussian_weight_field(target_grid, landmark, sigma_mm)
