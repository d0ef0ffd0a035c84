"""Procedural spine-like phantoms with controllable pathology.

Each phantom is a sagittal view of one functional spinal unit: two vertebra
bodies, the disc between them, a bright canal band behind the column, and
posterior soft tissue. Disc herniation renders as a posterior bulge of disc
material into the canal; canal stenosis as a local canal-width reduction at
disc level. Severity maps to deformation magnitude through disjoint ranges,
so higher ranks are strictly larger.

Images are float32 in [0, 1]. Generation is a pure function of
(spec, seed): per-sample RNGs derive from the master seed and sample index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, InvalidParameterError, StateError
from .geometry import LEVELS, PATHOLOGIES, SEVERITIES, Landmark, VolumeGrid
from .volumeio import read_volume, write_json, write_volume

CONDITIONS = ("normal",) + PATHOLOGIES
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters; all geometry ranges are in mm."""

    shape: tuple[int, ...] = (64, 64)
    spacing_mm: tuple[float, ...] = (1.25, 1.25)
    noise_sigma: float = 0.02
    smooth_mm: float = 1.1
    # intensity bands (uniform draw ranges)
    background: tuple[float, float] = (0.10, 0.14)
    vertebra: tuple[float, float] = (0.42, 0.50)
    disc: tuple[float, float] = (0.58, 0.66)
    canal: tuple[float, float] = (0.90, 0.96)
    posterior: tuple[float, float] = (0.24, 0.30)
    # anatomy ranges
    anterior_margin: tuple[float, float] = (7.0, 11.0)
    column_width: tuple[float, float] = (30.0, 36.0)
    epidural_gap: tuple[float, float] = (1.0, 2.0)
    canal_width_base: float = 13.0
    canal_width_per_level: float = -0.6
    canal_width_jitter: float = 1.5
    disc_center: tuple[float, float] = (36.0, 44.0)
    disc_height_base: float = 9.0
    disc_height_per_level: float = 0.5
    disc_height_jitter: float = 1.5
    # severity -> deformation magnitude (strictly increasing by rank)
    dh_depth_mm: dict = field(default_factory=lambda: {
        "small": (2.5, 4.5), "mod_large": (5.5, 9.0)})
    ccs_narrowing: dict = field(default_factory=lambda: {
        "moderate": (0.32, 0.45), "severe": (0.55, 0.72)})

    def __post_init__(self):
        if len(self.shape) not in (2, 3) or len(self.spacing_mm) != len(self.shape):
            raise InvalidParameterError("shape must be 2-D or 3-D with matching spacing")
        if any(s < 8 for s in self.shape[:2]) or any(s < 1 for s in self.shape):
            raise InvalidParameterError(f"degenerate phantom shape {self.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise InvalidParameterError(f"spacing must be positive, got {self.spacing_mm}")
        for pathology, table in (("dh", self.dh_depth_mm), ("ccs", self.ccs_narrowing)):
            ranges = [table[sev] for sev in SEVERITIES[pathology]]
            for lo, hi in ranges:
                if not 0 < lo < hi:
                    raise InvalidParameterError(f"bad magnitude range ({lo}, {hi})")
            for weaker, stronger in zip(ranges, ranges[1:]):
                if weaker[1] >= stronger[0]:
                    raise InvalidParameterError(
                        "severity magnitude ranges must be disjoint and increasing")

    @property
    def grid(self) -> VolumeGrid:
        return VolumeGrid(self.shape, self.spacing_mm)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing_mm": list(self.spacing_mm),
            "noise_sigma": self.noise_sigma,
            "smooth_mm": self.smooth_mm,
            "background": list(self.background),
            "vertebra": list(self.vertebra),
            "disc": list(self.disc),
            "canal": list(self.canal),
            "posterior": list(self.posterior),
            "anterior_margin": list(self.anterior_margin),
            "column_width": list(self.column_width),
            "epidural_gap": list(self.epidural_gap),
            "canal_width_base": self.canal_width_base,
            "canal_width_per_level": self.canal_width_per_level,
            "canal_width_jitter": self.canal_width_jitter,
            "disc_center": list(self.disc_center),
            "disc_height_base": self.disc_height_base,
            "disc_height_per_level": self.disc_height_per_level,
            "disc_height_jitter": self.disc_height_jitter,
            "dh_depth_mm": {k: list(v) for k, v in self.dh_depth_mm.items()},
            "ccs_narrowing": {k: list(v) for k, v in self.ccs_narrowing.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        kw = dict(d)
        for key in ("shape", "spacing_mm", "background", "vertebra", "disc", "canal",
                    "posterior", "anterior_margin", "column_width", "epidural_gap",
                    "disc_center"):
            if key in kw:
                kw[key] = tuple(kw[key])
        for key in ("dh_depth_mm", "ccs_narrowing"):
            if key in kw:
                kw[key] = {k: tuple(v) for k, v in kw[key].items()}
        return PhantomSpec(**kw)


@dataclass
class Sample:
    """One phantom: image volume plus labels, landmark, and region masks."""

    sample_id: str
    image: np.ndarray
    grid: VolumeGrid
    level: str
    pathology: str | None
    severity: str | None
    landmark: Landmark | None
    region_masks: dict[str, np.ndarray]
    split: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.pathology is None) != (self.landmark is None):
            raise DataError("pathology label and landmark must be present together")
        if self.pathology is not None and self.severity is None:
            raise DataError("pathological sample requires a severity")

    @property
    def condition(self) -> str:
        return self.pathology if self.pathology is not None else "normal"


def _draw_geom(rng: np.random.Generator, spec: PhantomSpec, level: str) -> dict:
    u = lambda lo_hi: float(rng.uniform(*lo_hi))
    li = LEVELS.index(level)
    x_ant = u(spec.anterior_margin)
    col_w = u(spec.column_width)
    gap = u(spec.epidural_gap)
    can_w = spec.canal_width_base + spec.canal_width_per_level * li \
        + float(rng.uniform(-spec.canal_width_jitter, spec.canal_width_jitter))
    h_d = spec.disc_height_base + spec.disc_height_per_level * li \
        + float(rng.uniform(-spec.disc_height_jitter, spec.disc_height_jitter))
    return {
        "level": level,
        "x_ant": x_ant,
        "col_w": col_w,
        "gap": gap,
        "can_w": can_w,
        "y_c": u(spec.disc_center),
        "h_d": h_d,
        "background": u(spec.background),
        "vertebra": u(spec.vertebra),
        "disc": u(spec.disc),
        "canal": u(spec.canal),
        "posterior": u(spec.posterior),
        "noise_seed": int(rng.integers(2**63)),
    }


def _render_plane(spec: PhantomSpec, geom: dict, scale: float = 1.0) -> np.ndarray:
    """Pre-noise intensity plane; ``scale`` modulates pathology magnitude (3-D)."""
    grid2 = VolumeGrid(spec.shape[:2], spec.spacing_mm[:2])
    ys, xs = grid2.axis_centers()
    Y = ys[:, None]
    X = xs[None, :]
    g = geom

    x_post = g["x_ant"] + g["col_w"]
    x_can = x_post + g["gap"]
    x_post_elem = x_can + g["can_w"] + 1.0

    img = np.full(grid2.shape, g["background"], dtype=np.float64)
    img[X.repeat(len(ys), 0) >= x_post_elem] = g["posterior"]
    column = (X >= g["x_ant"]) & (X <= x_post)
    img[np.broadcast_to(column, img.shape)] = g["vertebra"]
    disc_rows = np.abs(Y - g["y_c"]) <= g["h_d"] / 2.0
    img[disc_rows & column] = g["disc"]

    # canal band, possibly pinched by stenosis
    ant_border = np.full_like(ys, x_can)
    post_border = np.full_like(ys, x_can + g["can_w"])
    if "ccs_fraction" in g and scale > 0:
        f = g["ccs_fraction"] * scale
        h_s = g["h_d"] * 1.25
        u_rows = (ys - g["y_c"]) / (h_s / 2.0)
        profile = np.where(np.abs(u_rows) <= 1.0, np.cos(np.pi * u_rows / 2.0) ** 2, 0.0)
        ant_border = ant_border + 0.6 * f * g["can_w"] * profile
        post_border = post_border - 0.4 * f * g["can_w"] * profile
    canal = (X >= ant_border[:, None]) & (X <= post_border[:, None])
    img[canal] = g["canal"]
    if "ccs_fraction" in g and scale > 0:
        base_canal = (X >= x_can) & (X <= x_can + g["can_w"])
        pinched_ant = base_canal & (X < ant_border[:, None])
        pinched_post = base_canal & (X > post_border[:, None])
        img[pinched_ant] = g["disc"] * 0.92
        img[pinched_post] = 0.34

    if "dh_depth" in g and scale > 0:
        d = g["dh_depth"] * scale
        a = g["dh_half_height"]
        y_cb = g["y_c"] + g["dh_y_offset"]
        bulge = (X >= x_post) & (
            ((Y - y_cb) / a) ** 2 + ((X - x_post) / d) ** 2 <= 1.0)
        img[bulge] = g["disc"] * 0.92
    return img


def _region_masks(spec: PhantomSpec, geom: dict) -> dict[str, np.ndarray]:
    """Pathology-plausible insertion regions (computable for any sample)."""
    grid2 = VolumeGrid(spec.shape[:2], spec.spacing_mm[:2])
    ys, xs = grid2.axis_centers()
    Y = ys[:, None]
    X = xs[None, :]
    g = geom
    x_post = g["x_ant"] + g["col_w"]
    x_can = x_post + g["gap"]
    dh_max = max(hi for _, hi in spec.dh_depth_mm.values())
    dh = (X >= x_post - 1.0) & (X <= x_post + dh_max + 0.5) \
        & (np.abs(Y - g["y_c"]) <= g["h_d"] / 2.0 + 2.0)
    ccs = (X >= x_can) & (X <= x_can + g["can_w"]) \
        & (np.abs(Y - g["y_c"]) <= g["h_d"] / 2.0)
    masks = {"dh": dh.astype(np.uint8), "ccs": ccs.astype(np.uint8)}
    if len(spec.shape) == 3:
        n_slices = spec.shape[2]
        zc = (n_slices - 1) / 2.0
        in_band = np.abs(np.arange(n_slices) - zc) <= n_slices / 4.0
        for key, m in masks.items():
            masks[key] = (m[:, :, None] & in_band[None, None, :]).astype(np.uint8)
    return masks


def _slice_profiles(n_slices: int) -> np.ndarray:
    zc = (n_slices - 1) / 2.0
    u = (np.arange(n_slices) - zc) / (n_slices / 2.0)
    return np.sqrt(np.clip(1.0 - u**2, 0.0, None))


def _render(spec: PhantomSpec, geom: dict) -> np.ndarray:
    if len(spec.shape) == 2:
        img = _render_plane(spec, geom)
    else:
        profiles = _slice_profiles(spec.shape[2])
        img = np.stack([_render_plane(spec, geom, scale=float(p)) for p in profiles],
                       axis=2)
    sigma_px = [spec.smooth_mm / s for s in spec.spacing_mm]
    img = gaussian_filter(img, sigma=sigma_px, mode="nearest")
    noise_rng = np.random.default_rng(geom["noise_seed"])
    img = img + spec.noise_sigma * noise_rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _landmark_position(spec: PhantomSpec, geom: dict, pathology: str) -> tuple[float, ...]:
    g = geom
    x_post = g["x_ant"] + g["col_w"]
    if pathology == "dh":
        pos = (g["y_c"] + g["dh_y_offset"], x_post + g["dh_depth"])
    else:
        x_can = x_post + g["gap"]
        pos = (g["y_c"], x_can + g["can_w"] / 2.0)
    if len(spec.shape) == 3:
        zc_mm = (spec.shape[2] - 1) / 2.0 * spec.spacing_mm[2]
        pos = pos + (zc_mm,)
    return pos


def generate_phantom(rng: np.random.Generator, spec: PhantomSpec, level: str,
                     sample_id: str = "phantom") -> Sample:
    """Normal (pathology-free) phantom; deterministic given the RNG state."""
    if level not in LEVELS:
        raise InvalidParameterError(f"unknown level {level!r}")
    geom = _draw_geom(rng, spec, level)
    return Sample(
        sample_id=sample_id,
        image=_render(spec, geom),
        grid=spec.grid,
        level=level,
        pathology=None,
        severity=None,
        landmark=None,
        region_masks=_region_masks(spec, geom),
        meta={"geom": geom, "spec": spec.to_dict()},
    )


def _apply_pathology(sample: Sample, pathology: str, severity: str,
                     rng: np.random.Generator) -> Sample:
    if sample.pathology is not None:
        raise StateError(f"sample {sample.sample_id} already carries {sample.pathology}")
    if severity not in SEVERITIES[pathology]:
        raise InvalidParameterError(f"unknown severity {severity!r} for {pathology}")
    spec = PhantomSpec.from_dict(sample.meta["spec"])
    geom = dict(sample.meta["geom"])
    if pathology == "dh":
        lo, hi = spec.dh_depth_mm[severity]
        geom["dh_depth"] = float(rng.uniform(lo, hi))
        geom["dh_half_height"] = float(geom["h_d"] / 2.0 * rng.uniform(0.8, 1.1))
        geom["dh_y_offset"] = float(rng.uniform(-0.15, 0.15) * geom["h_d"])
    else:
        lo, hi = spec.ccs_narrowing[severity]
        geom["ccs_fraction"] = float(rng.uniform(lo, hi))
    landmark = Landmark(_landmark_position(spec, geom, pathology),
                        sample.level, pathology, severity)
    return Sample(
        sample_id=sample.sample_id,
        image=_render(spec, geom),
        grid=sample.grid,
        level=sample.level,
        pathology=pathology,
        severity=severity,
        landmark=landmark,
        region_masks=sample.region_masks,
        split=sample.split,
        meta={**sample.meta, "geom": geom},
    )


def apply_herniation(sample: Sample, severity: str, rng: np.random.Generator) -> Sample:
    """Posterior disc bulge into the canal; the landmark marks the bulge apex."""
    return _apply_pathology(sample, "dh", severity, rng)


def apply_stenosis(sample: Sample, severity: str, rng: np.random.Generator) -> Sample:
    """Canal-width narrowing at disc level; the landmark marks the canal center."""
    return _apply_pathology(sample, "ccs", severity, rng)


def deformation_magnitude(sample: Sample) -> float:
    """Logged geometric magnitude of the applied pathology (mm or fraction)."""
    g = sample.meta["geom"]
    if sample.pathology == "dh":
        return g["dh_depth"]
    if sample.pathology == "ccs":
        return g["ccs_fraction"]
    raise StateError("sample carries no pathology")


# ---------------------------------------------------------------------------
# dataset assembly and on-disk layout
# ---------------------------------------------------------------------------

def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    rema = [r - c for r, c in zip(raw, counts)]
    for i in sorted(range(len(raw)), key=lambda i: -rema[i])[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _sample_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))


def plan_dataset(n: int, mix: dict[str, float], seed: int) -> list[dict]:
    """Deterministic per-sample plan: condition, severity, level, split."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    mix = {k: float(v) for k, v in mix.items() if float(v) > 0}
    if not mix or any(k not in CONDITIONS for k in mix):
        raise DataError(f"mix keys must be among {CONDITIONS} with positive fractions")
    total = sum(mix.values())
    conditions = sorted(mix)
    counts = _largest_remainder(n, [mix[c] / total for c in conditions])

    plan = []
    for condition, count in zip(conditions, counts):
        severities = SEVERITIES.get(condition, (None,))
        strata = [(lvl, sev) for lvl in LEVELS for sev in severities]
        stratum_counts = _largest_remainder(count, [1.0 / len(strata)] * len(strata))
        for (level, severity), m in zip(strata, stratum_counts):
            if m < 1:
                raise DataError(
                    f"n={n} too small for stratification: stratum "
                    f"({condition}, {level}, {severity}) would be empty")
            split_counts = _largest_remainder(m, SPLIT_FRACTIONS)
            splits = [s for s, c in zip(SPLITS, split_counts) for _ in range(c)]
            for split in splits:
                plan.append({"condition": condition, "severity": severity,
                             "level": level, "split": split})
    for split in SPLITS:
        if not any(e["split"] == split for e in plan):
            raise DataError(f"n={n} too small for stratification: split {split!r} empty")
    for index, entry in enumerate(plan):
        entry["index"] = index
        entry["id"] = f"{index:06d}"
    return plan


def build_sample(entry: dict, spec: PhantomSpec, seed: int) -> Sample:
    rng = np.random.default_rng(_sample_seed(seed, entry["index"]))
    sample = generate_phantom(rng, spec, entry["level"], sample_id=entry["id"])
    if entry["condition"] == "dh":
        sample = apply_herniation(sample, entry["severity"], rng)
    elif entry["condition"] == "ccs":
        sample = apply_stenosis(sample, entry["severity"], rng)
    sample.split = entry["split"]
    return sample


def make_dataset(out_dir, n: int, mix: dict[str, float], seed: int,
                 spec: PhantomSpec | None = None) -> dict:
    """Generate n phantoms, write manifest + volumes, return the summary."""
    spec = spec or PhantomSpec()
    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    plan = plan_dataset(n, mix, seed)

    records = []
    counts: dict[str, int] = {}
    for entry in plan:
        sample = build_sample(entry, spec, seed)
        img_rel = f"samples/{sample.sample_id}_image.svol"
        write_volume(out_dir / img_rel, sample.image, sample.grid)
        regions = {}
        for pathology, mask in sample.region_masks.items():
            rel = f"samples/{sample.sample_id}_region_{pathology}.svol"
            write_volume(out_dir / rel, mask, sample.grid)
            regions[pathology] = rel
        rec = {
            "id": sample.sample_id,
            "level": sample.level,
            "condition": sample.condition,
            "severity": sample.severity,
            "split": sample.split,
            "image": img_rel,
            "regions": regions,
            "landmark": sample.landmark.to_record() if sample.landmark else None,
            "geom": {k: v for k, v in sample.meta["geom"].items() if k != "level"},
        }
        records.append(rec)
        key = f"{sample.level}|{sample.condition}|{sample.severity}|{sample.split}"
        counts[key] = counts.get(key, 0) + 1

    with open(out_dir / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {
        "n": n,
        "seed": seed,
        "mix": {k: float(v) for k, v in mix.items()},
        "spec": spec.to_dict(),
        "support": counts,
        "splits": {s: sum(1 for r in records if r["split"] == s) for s in SPLITS},
    }
    write_json(out_dir / "summary.json", summary)
    return summary


class SampleDataset:
    """Manifest-backed dataset directory with lazy sample loading."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise DataError(f"{self.root}: no manifest.jsonl")
        with open(manifest) as f:
            self.records = [json.loads(line) for line in f if line.strip()]
        self.summary = json.loads((self.root / "summary.json").read_text())
        self.spec = PhantomSpec.from_dict(self.summary["spec"])

    def __len__(self) -> int:
        return len(self.records)

    def select(self, split: str | None = None, condition: str | None = None,
               level: str | None = None, severity: str | None = None) -> list[dict]:
        out = self.records
        if split is not None:
            out = [r for r in out if r["split"] == split]
        if condition is not None:
            out = [r for r in out if r["condition"] == condition]
        if level is not None:
            out = [r for r in out if r["level"] == level]
        if severity is not None:
            out = [r for r in out if r["severity"] == severity]
        return out

    def load_image(self, rec: dict) -> np.ndarray:
        image, _ = read_volume(self.root / rec["image"])
        return image

    def load_sample(self, rec: dict) -> Sample:
        image, grid = read_volume(self.root / rec["image"])
        regions = {}
        for pathology, rel in rec["regions"].items():
            regions[pathology], _ = read_volume(self.root / rel)
        landmark = Landmark.from_record(rec["landmark"]) if rec["landmark"] else None
        return Sample(
            sample_id=rec["id"],
            image=image,
            grid=grid,
            level=rec["level"],
            pathology=None if rec["condition"] == "normal" else rec["condition"],
            severity=rec["severity"],
            landmark=landmark,
            region_masks=regions,
            split=rec["split"],
            meta={"geom": dict(rec["geom"], level=rec["level"]),
                  "spec": self.summary["spec"]},
        )

    def fingerprint(self) -> str:
        return hashlib.sha256((self.root / "manifest.jsonl").read_bytes()).hexdigest()
