"""Noise schedules and the spatially weighted forward (noising) process.

Index convention: t = 0 means clean data, so all tables have length T + 1
with alpha_bar[0] = 1. A voxel whose weighted timestep rounds to 0 is left
bit-identical to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ShapeError
from .geometry import VolumeGrid, WeightField

SCHEDULE_KINDS = ("linear", "scaled_linear")

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


def round_half_up(x) -> np.ndarray:
    """Round to nearest integer with halves going up (platform independent)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their cumulative products.

    beta[t] is the variance of the noise added at step t (beta[0] = 0 by
    the clean-data convention); alpha = 1 - beta; alpha_bar is the running
    product of alpha.
    """

    kind: str
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def params(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def build_schedule(kind: str = "linear", T: int = DEFAULT_T,
                   beta_start: float = DEFAULT_BETA_START,
                   beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise InvalidParameterError(f"unknown schedule kind {kind!r}; expected {SCHEDULE_KINDS}")
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(beta_start**0.5, beta_end**0.5, T, dtype=np.float64) ** 2
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(kind, int(T), float(beta_start), float(beta_end),
                         beta, alpha, alpha_bar)


@dataclass(frozen=True)
class TimestepField:
    """Per-voxel integer timesteps derived from a weight field at global t."""

    grid: VolumeGrid
    t_v: np.ndarray = field(repr=False)
    global_t: int

    def __post_init__(self):
        t_v = np.asarray(self.t_v, dtype=np.int64)
        if t_v.shape != self.grid.shape:
            raise ShapeError(f"t_v shape {t_v.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "t_v", t_v)


def voxel_timesteps(w: WeightField, t: int, t_max: int) -> TimestepField:
    """Per-voxel timesteps round(W_v * t), round-half-up."""
    if not 0 <= t <= t_max:
        raise InvalidParameterError(f"t must lie in [0, {t_max}], got {t}")
    return TimestepField(w.grid, round_half_up(w.values * float(t)), int(t))


def q_sample_weighted(x0: np.ndarray, tf: TimestepField, sched: NoiseSchedule,
                      noise: np.ndarray) -> np.ndarray:
    """Weighted forward process: per voxel, sqrt(abar_{t_v}) x0 + sqrt(1 - abar_{t_v}) eps.

    x0 and noise may carry leading channel/batch axes ahead of the grid's
    spatial shape; the timestep field broadcasts over them. Voxels with
    t_v = 0 come back bit-identical to x0.
    """
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    spatial = tf.grid.shape
    if x0.shape[-len(spatial):] != spatial:
        raise ShapeError(f"x0 trailing shape {x0.shape} does not match grid {spatial}")
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    if tf.t_v.max(initial=0) > sched.T:
        raise InvalidParameterError("timestep field exceeds schedule length")
    abar = sched.alpha_bar[tf.t_v]
    dtype = x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64
    coef_signal = np.sqrt(abar).astype(dtype)
    coef_noise = np.sqrt(1.0 - abar).astype(dtype)
    return coef_signal * x0.astype(dtype) + coef_noise * noise.astype(dtype)
