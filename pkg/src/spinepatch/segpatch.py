"""Per-vertebra patches cut from directionally expanded contours.

Each annotated vertebra yields one patch: its contour (traced from the
segmentation mask, or built from the six annotated points) is pushed out
towards -X and +Y by region-specific amounts, the crop is the bounding box
of the expanded contour, and the patch is ``present`` when an osteophyte
point falls inside the chosen label geometry.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

from .annotations import REGIONS, DatasetManifest, PatchRecord, ScanRecord, q3, vertebra_polygon
from .errors import ConfigurationError, InvalidArgumentError
from .geometry import BBox, Polygon, bbox_of, expand_contour, point_in_polygon
from .raster import crop, load_image, pixel_window, save_image, trace_mask_contour
from .runner import run_per_scan
from .tiling import class_counts

log = logging.getLogger(__name__)

CONTOUR_SOURCES = ("mask", "six_points")
LABEL_GEOMETRIES = ("expanded_polygon", "crop_bbox")


@dataclass(frozen=True)
class SegPatchConfig:
    dx_minus_x: dict = field(default_factory=lambda: {"cervical": 40.0, "lumbar": 60.0})
    dy_plus_y: dict = field(default_factory=lambda: {"cervical": 30.0, "lumbar": 45.0})
    # "mask" falls back to the six points for scans that carry no masks at all
    contour_source: str = "mask"
    label_geometry: str = "expanded_polygon"

    def __post_init__(self):
        for name in ("dx_minus_x", "dy_plus_y"):
            table = getattr(self, name)
            for region in REGIONS:
                if region not in table:
                    raise InvalidArgumentError(f"{name} has no value for region {region!r}")
                if table[region] < 0:
                    raise InvalidArgumentError(
                        f"{name}[{region}] must be non-negative, got {table[region]}")
        if self.contour_source not in CONTOUR_SOURCES:
            raise InvalidArgumentError(f"contour_source must be one of {CONTOUR_SOURCES}")
        if self.label_geometry not in LABEL_GEOMETRIES:
            raise InvalidArgumentError(f"label_geometry must be one of {LABEL_GEOMETRIES}")

    def scaled(self, factor: float) -> "SegPatchConfig":
        return replace(self,
                       dx_minus_x={k: v * factor for k, v in self.dx_minus_x.items()},
                       dy_plus_y={k: v * factor for k, v in self.dy_plus_y.items()})


def vertebra_contour(scan: ScanRecord, vertebra, cfg: SegPatchConfig, base_dir=Path(".")) -> Polygon:
    if cfg.contour_source == "mask" and scan.mask_paths is not None:
        idx = [v.vertebra_id for v in scan.vertebrae].index(vertebra.vertebra_id)
        path = Path(base_dir) / scan.mask_paths[idx]
        if not path.exists():
            raise ConfigurationError(
                f"scan {scan.scan_id!r}: mask for vertebra {vertebra.vertebra_id!r} not found at {path}")
        return trace_mask_contour(load_image(path) > 0)
    return vertebra_polygon(vertebra)


def expanded_contour(scan: ScanRecord, vertebra, cfg: SegPatchConfig, base_dir=Path(".")) -> Polygon:
    contour = vertebra_contour(scan, vertebra, cfg, base_dir)
    dx, dy = cfg.dx_minus_x[scan.region], cfg.dy_plus_y[scan.region]
    if len(contour) < 3:
        # a one- or two-pixel trace has no interior: grow its bbox instead
        b = bbox_of(contour)
        grown = BBox(b.x0 - dx, b.y0, b.x1, b.y1 + dy)
        if grown.width > 0 and grown.height > 0:
            return Polygon([(grown.x0, grown.y0), (grown.x1, grown.y0),
                            (grown.x1, grown.y1), (grown.x0, grown.y1)])
        return contour
    return expand_contour(contour, dx, dy)


def _contains(geom, p) -> bool:
    if isinstance(geom, BBox):
        return geom.contains(p)
    if len(geom) < 3:
        return bbox_of(geom).contains(p)
    return point_in_polygon(p, geom)


def make_segpatch(scan: ScanRecord, vertebra, cfg: SegPatchConfig, img=None, base_dir=Path(".")):
    """Return ``(record, crop_image)``; ``(None, reason)`` when the crop is empty.

    ``crop_image`` is None when no image is supplied.
    """
    expanded = expanded_contour(scan, vertebra, cfg, base_dir)
    raw = bbox_of(expanded)
    clamped = raw.clamp(0, 0, scan.width - 1, scan.height - 1)
    if clamped is None:
        return None, f"scan {scan.scan_id!r} vertebra {vertebra.vertebra_id!r}: crop {raw} lies outside the image"
    box = BBox(q3(clamped.x0), q3(clamped.y0), q3(clamped.x1), q3(clamped.y1))
    geom = expanded if cfg.label_geometry == "expanded_polygon" else box
    present = any(_contains(geom, o.location) for o in scan.osteophytes)
    rec = PatchRecord(
        patch_id=f"{scan.scan_id}_{vertebra.vertebra_id}",
        scan_id=scan.scan_id,
        method="segpatch",
        crop=box,
        label="present" if present else "absent",
        source_vertebra=vertebra.vertebra_id,
    )
    patch_img = crop(img, pixel_window(box)) if img is not None else None
    return rec, patch_img


def _segpatch_scan(scan: ScanRecord, base_dir: Path, cfg: SegPatchConfig, out_dir, split):
    img = load_image(base_dir / scan.image_path) if out_dir is not None else None
    records, warnings = [], []
    for v in scan.vertebrae:
        rec, patch = make_segpatch(scan, v, cfg, img, base_dir)
        if rec is None:
            warnings.append(patch)
            continue
        rec = replace(rec, split=split)
        if out_dir is not None:
            save_image(patch, Path(out_dir) / "segpatch" / rec.label / f"{rec.patch_id}.png")
        records.append(rec)
    return records, warnings


def run_segpatch(manifest: DatasetManifest, cfg: SegPatchConfig, out_dir=None, jobs: int = 1):
    """One patch per annotated vertebra.

    Returns ``(manifest, summary, coverage, failures)``; crops go to
    ``out_dir/segpatch/{present,absent}/{scan_id}_{vertebra_id}.png``.
    """
    if out_dir is not None:
        for label in ("present", "absent"):
            (Path(out_dir) / "segpatch" / label).mkdir(parents=True, exist_ok=True)
    tasks = [(s, manifest.base_dir, cfg, out_dir, manifest.split_of(s.scan_id)) for s in manifest.scans]
    results, failures = run_per_scan(_segpatch_scan, tasks, jobs)
    patches, warnings = [], []
    for recs, warns in results:
        patches.extend(recs)
        warnings.extend(warns)
    for w in warnings:
        log.warning("skipped: %s", w)
    out = manifest.with_patches("segpatch", patches)
    summary = class_counts(patches)
    summary["skipped"] = warnings
    coverage = coverage_report(out)
    log.info("segpatch: %d patches, %d present, %d osteophytes uncovered",
             summary["total"], summary["present"], len(coverage["uncovered"]))
    failures = [(tasks[i][0].scan_id, msg) for i, msg in failures]
    return out, summary, coverage, failures


def coverage_report(manifest: DatasetManifest, method: str = "segpatch") -> dict:
    """Osteophyte points that no patch crop of ``method`` contains (closed boxes)."""
    boxes = defaultdict(list)
    for p in manifest.patches_for(method):
        boxes[p.scan_id].append(p.crop)
    uncovered = []
    stats = {r: {"osteophytes": 0, "covered": 0, "uncovered": 0} for r in REGIONS}
    for scan in sorted(manifest.scans, key=lambda s: s.scan_id):
        for o in scan.osteophytes:
            hit = any(b.contains(o.location) for b in boxes[scan.scan_id])
            stats[scan.region]["osteophytes"] += 1
            stats[scan.region]["covered" if hit else "uncovered"] += 1
            if not hit:
                uncovered.append({"scan_id": scan.scan_id, "x": o.location.x, "y": o.location.y})
    total = sum(s["osteophytes"] for s in stats.values())
    covered = sum(s["covered"] for s in stats.values())
    return {
        "method": method,
        "uncovered": uncovered,
        "by_region": stats,
        "osteophytes": total,
        "coverage": covered / total if total else 1.0,
    }
