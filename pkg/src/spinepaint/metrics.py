"""Landmark-patch cropping, Frechet feature distance, and MS-SSIM.

MS-SSIM follows Wang et al.'s multi-scale construction: 5 scales, the
canonical scale weights, an 11x11 sigma-1.5 Gaussian window applied with
valid padding, and 2x average-pool downsampling. Patches smaller than the
176-pixel minimum (11 * 2^4) are bilinearly upsampled first.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.ndimage import correlate1d

from .errors import (
    DataError,
    InvalidLandmarkError,
    InvalidParameterError,
    NumericalError,
    ShapeError,
)
from .geometry import VolumeGrid
from .schedule import round_half_up

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DEFAULT_PATCH_EXTENT_MM = (25.0, 25.0)


def crop_landmark_patch(image: np.ndarray, grid: VolumeGrid, position_mm,
                        extent_mm=None) -> tuple[np.ndarray, dict]:
    """Patch of the given mm extent centered on the landmark.

    Regions falling outside the image are zero-padded; the returned metadata
    records the padding amounts.
    """
    image = np.asarray(image)
    if image.shape != grid.shape:
        raise ShapeError(f"image shape {image.shape} != grid shape {grid.shape}")
    if not grid.contains(position_mm):
        raise InvalidLandmarkError(f"landmark {tuple(position_mm)} outside image extent")
    if extent_mm is None:
        extent_mm = DEFAULT_PATCH_EXTENT_MM[: grid.ndim] if grid.ndim == 2 \
            else DEFAULT_PATCH_EXTENT_MM + (50.0,)
    widths = [max(1, int(round_half_up(e / s)))
              for e, s in zip(extent_mm, grid.spacing)]
    center = grid.nearest_voxel(position_mm)
    starts = [c - wd // 2 for c, wd in zip(center, widths)]
    pad = []
    slices = []
    for start, wd, size in zip(starts, widths, grid.shape):
        lo = max(0, -start)
        hi = max(0, start + wd - size)
        pad.append([lo, hi])
        slices.append(slice(start + lo, start + wd - hi))
    patch = image[tuple(slices)]
    if any(lo or hi for lo, hi in pad):
        patch = np.pad(patch, pad, mode="constant", constant_values=0)
    meta = {"padded": bool(any(lo or hi for lo, hi in pad)), "pad": pad,
            "center_voxel": list(center), "widths": widths}
    return patch, meta


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------

def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    r = len(window) // 2
    out = img
    for axis in range(img.ndim):
        out = correlate1d(out, window, axis=axis, mode="constant")
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(r, out.shape[axis] - r)
        out = out[tuple(sl)]
    return out


def _ssim_and_cs(a: np.ndarray, b: np.ndarray, data_range: float,
                 window: np.ndarray) -> tuple[float, float]:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a**2
    var_b = _filter_valid(b * b, window) - mu_b**2
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    ssim_map = ((2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def bilinear_resize(img: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Deterministic 2-D bilinear resize (half-pixel-center convention)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    oh, ow = out_shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: 2 * (h // 2), : 2 * (w // 2)]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
            weights=MSSSIM_WEIGHTS, win_size: int = 11, win_sigma: float = 1.5,
            allow_upsample: bool = True) -> float:
    """Multi-scale structural similarity between two 2-D patches in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"patch shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"ms_ssim expects 2-D patches, got shape {a.shape}")
    levels = len(weights)
    min_required = win_size * 2 ** (levels - 1)
    if min(a.shape) < min_required:
        if not allow_upsample:
            raise InvalidParameterError(
                f"patch {a.shape} smaller than {min_required} and upsampling disabled")
        factor = min_required / min(a.shape)
        out_shape = tuple(int(round_half_up(s * factor)) for s in a.shape)
        a = bilinear_resize(a, out_shape)
        b = bilinear_resize(b, out_shape)
    window = _gaussian_window(win_size, win_sigma)
    values = []
    for level in range(levels):
        if min(a.shape) < win_size:
            raise InvalidParameterError(
                f"patch too small at scale {level}: {a.shape} < window {win_size}")
        ssim_val, cs_val = _ssim_and_cs(a, b, data_range, window)
        values.append(max(ssim_val if level == levels - 1 else cs_val, 0.0))
        if level < levels - 1:
            a = _downsample2(a)
            b = _downsample2(b)
    return float(np.prod([v**wgt for v, wgt in zip(values, weights)]))


def mean_pairwise_ms_ssim(patches) -> float:
    """Mean MS-SSIM over all unordered pairs (diversity: lower = more diverse)."""
    if len(patches) < 2:
        raise DataError("need at least two patches for pairwise MS-SSIM")
    scores = [ms_ssim(patches[i], patches[j])
              for i in range(len(patches)) for j in range(i + 1, len(patches))]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

def gaussian_stats(feats: np.ndarray, jitter: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n, d = feats.shape
    if n < 2:
        raise DataError(f"need >= 2 feature rows, got {n}")
    mu = feats.mean(axis=0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    if n <= d:
        # fewer rows than dimensions: regularize the singular estimate
        cov = cov + jitter * np.eye(d)
    return mu, cov


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, jitter: float = 1e-6) -> float:
    """Squared Wasserstein-2 distance between two Gaussians."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeError("statistic shapes differ")
    diff = float(((mu_a - mu_b) ** 2).sum())

    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all():
        eye = jitter * np.eye(len(mu_a))
        covmean, _ = linalg.sqrtm((cov_a + eye) @ (cov_b + eye), disp=False)
    if np.iscomplexobj(covmean):
        if not np.allclose(covmean.imag, 0.0, atol=1e-3):
            raise NumericalError("matrix square root has a large imaginary part")
        covmean = covmean.real
    if not np.isfinite(covmean).all():
        raise NumericalError("matrix square root is non-finite after regularization")
    value = diff + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray,
                     jitter: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if len(np.atleast_2d(feats_a)) == 0 or len(np.atleast_2d(feats_b)) == 0:
        raise DataError("empty feature set")
    mu_a, cov_a = gaussian_stats(feats_a, jitter)
    mu_b, cov_b = gaussian_stats(feats_b, jitter)
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b, jitter)
