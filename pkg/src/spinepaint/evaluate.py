"""Per-cell evaluation: Frechet distance, pairwise MS-SSIM, and rates.

One cell is a (level, severity) bucket of a pathology. For each method the
report carries: FD between inpainted-normal patches and real-pathology
reference patches, the mean pairwise MS-SSIM over repeated generations on
the same inputs (diversity; lower = more diverse), support counts, and the
classifier-judged pathology / in-distribution rates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .classifier import FeatureExtractor, in_distribution_rate, pathology_rate
from .errors import DataError
from .geometry import LEVELS, SEVERITIES, VolumeGrid
from .metrics import crop_landmark_patch, frechet_distance, mean_pairwise_ms_ssim
from .volumeio import read_volume, write_json


@dataclass
class ConditionCell:
    method: str
    pathology: str
    level: str
    severity: str
    support_outputs: int
    support_reference: int
    diversity_groups: int
    fd: float | None
    ms_ssim: float | None
    pathology_rate: float | None
    in_distribution_rate: float | None


def load_outputs_dir(path) -> tuple[dict, list[dict]]:
    """Read an inpaint output directory into memory."""
    path = Path(path)
    run = json.loads((path / "run.json").read_text())
    records = []
    with open(path / "outputs.jsonl") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            image, grid = read_volume(path / rec["image"])
            rec["image_array"] = image
            rec["grid"] = grid
            records.append(rec)
    return run, records


def _patch_of(rec: dict, extent_mm) -> np.ndarray:
    patch, _ = crop_landmark_patch(rec["image_array"], rec["grid"],
                                   rec["landmark"]["position_mm"], extent_mm)
    return patch


def reference_patches(dataset, pathology: str, split: str | None,
                      extent_mm) -> dict[tuple[str, str], list[np.ndarray]]:
    """Landmark patches of real pathological samples, bucketed per cell."""
    buckets: dict[tuple[str, str], list[np.ndarray]] = {}
    for rec in dataset.select(split=split, condition=pathology):
        sample = dataset.load_sample(rec)
        patch, _ = crop_landmark_patch(sample.image, sample.grid,
                                       sample.landmark.position_mm, extent_mm)
        buckets.setdefault((rec["level"], rec["severity"]), []).append(patch)
    if not buckets:
        raise DataError(f"no {pathology} reference samples found")
    return buckets


def evaluate_method(method: str, outputs: list[dict], reference, clf: FeatureExtractor,
                    pathology: str) -> tuple[list[ConditionCell], dict]:
    """Cells + overall rates for one method's outputs."""
    extent = clf.config.patch_extent_mm
    gen0 = [o for o in outputs if o["gen_index"] == 0]
    cells = []
    for level in LEVELS:
        for severity in SEVERITIES[pathology]:
            out_cell = [o for o in gen0
                        if o["level"] == level and o["severity"] == severity]
            ref_cell = reference.get((level, severity), [])
            fd = None
            cell_rates = (None, None)
            if len(out_cell) >= 2 and len(ref_cell) >= 2:
                out_patches = np.stack([_patch_of(o, extent) for o in out_cell])
                fd = frechet_distance(clf.features(out_patches),
                                      clf.features(np.stack(ref_cell)))
                probs = clf.probs(out_patches)
                cell_rates = (pathology_rate(probs), in_distribution_rate(probs))

            groups: dict[str, list[dict]] = {}
            for o in outputs:
                if o["level"] == level and o["severity"] == severity:
                    groups.setdefault(o["input_id"], []).append(o)
            pair_scores = []
            n_groups = 0
            for members in groups.values():
                if len(members) >= 2:
                    patches = [_patch_of(o, extent) for o in
                               sorted(members, key=lambda m: m["gen_index"])]
                    pair_scores.append(mean_pairwise_ms_ssim(patches))
                    n_groups += 1
            msv = float(np.mean(pair_scores)) if pair_scores else None

            cells.append(ConditionCell(
                method=method, pathology=pathology, level=level, severity=severity,
                support_outputs=len(out_cell), support_reference=len(ref_cell),
                diversity_groups=n_groups, fd=fd, ms_ssim=msv,
                pathology_rate=cell_rates[0], in_distribution_rate=cell_rates[1]))

    overall: dict = {"method": method, "n_outputs": len(gen0)}
    if gen0:
        patches = np.stack([_patch_of(o, extent) for o in gen0])
        probs = clf.probs(patches)
        overall["pathology_rate"] = pathology_rate(probs)
        overall["in_distribution_rate"] = in_distribution_rate(probs)
    return cells, overall


def write_report(out_dir, cells: list[ConditionCell], overall: list[dict],
                 provenance: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = ["method", "pathology", "level", "severity", "support_outputs",
              "support_reference", "diversity_groups", "fd", "ms_ssim",
              "pathology_rate", "in_distribution_rate"]
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for cell in cells:
            row = asdict(cell)
            for key in ("fd", "ms_ssim", "pathology_rate", "in_distribution_rate"):
                row[key] = "" if row[key] is None else f"{row[key]:.6f}"
            writer.writerow(row)
    write_json(out_dir / "report.json", {"overall": overall, "provenance": provenance})
    (out_dir / "report.txt").write_text(render_table(cells, overall))


def _fmt(value, width=9) -> str:
    return f"{'-':>{width}}" if value is None else f"{value:>{width}.3f}"


def render_table(cells: list[ConditionCell], overall: list[dict] | None = None) -> str:
    """Comparison table: rows are (level, condition), columns method x metric."""
    methods = sorted({c.method for c in cells})
    by_key: dict[tuple, dict[str, ConditionCell]] = {}
    for cell in cells:
        by_key.setdefault((cell.pathology, cell.level, cell.severity), {})[cell.method] = cell
    lines = []
    header = f"{'FSU':>6} {'Condition':>18} {'Support':>8}"
    header += " |" + "".join(f"{m:>10}" for m in methods) + "  (FD)"
    header += " |" + "".join(f"{m:>10}" for m in methods) + "  (MS-SSIM)"
    lines.append(header)
    lines.append("-" * len(header))
    for (pathology, level, severity), row in sorted(by_key.items()):
        any_cell = next(iter(row.values()))
        label = f"{severity} {pathology.upper()}"
        line = f"{level:>6} {label:>18} {any_cell.support_reference:>8}"
        line += " |" + "".join(_fmt(row[m].fd, 10) if m in row else _fmt(None, 10)
                               for m in methods)
        line += "       |" + "".join(
            _fmt(row[m].ms_ssim, 10) if m in row else _fmt(None, 10) for m in methods)
        lines.append(line)
    if overall:
        lines.append("")
        for entry in overall:
            if "pathology_rate" in entry:
                lines.append(
                    f"{entry['method']}: pathology rate "
                    f"{entry['pathology_rate']:.3f}, in-distribution rate "
                    f"{entry['in_distribution_rate']:.3f} over {entry['n_outputs']} outputs")
    return "\n".join(lines) + "\n"
