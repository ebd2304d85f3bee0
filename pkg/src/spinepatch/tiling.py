"""Baseline patch generator: a fixed grid of tiles labelled by annotation boxes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .annotations import DatasetManifest, OsteophytePoint, PatchRecord, ScanRecord
from .errors import InvalidArgumentError
from .geometry import BBox, bbox_intersects, point_to_box
from .raster import crop, load_image, pixel_window, save_image
from .runner import run_per_scan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TilingConfig:
    tile_w: int = 224
    tile_h: int = 224
    annotation_half_extent: float = 18

    def __post_init__(self):
        if self.tile_w < 1 or self.tile_h < 1:
            raise InvalidArgumentError(
                f"--tile-w/--tile-h must be positive, got {self.tile_w}x{self.tile_h}")
        if not self.annotation_half_extent > 0:
            raise InvalidArgumentError(
                f"--half-extent must be positive, got {self.annotation_half_extent}")

    def scaled(self, factor: float) -> "TilingConfig":
        """Same physical tile and box size on an image resampled by ``factor``."""
        if not factor > 0:
            raise InvalidArgumentError(f"scale factor must be positive, got {factor}")
        return TilingConfig(tile_w=max(1, int(round(self.tile_w * factor))),
                            tile_h=max(1, int(round(self.tile_h * factor))),
                            annotation_half_extent=self.annotation_half_extent * factor)


def _axis_starts(size: int, tile: int) -> list[int]:
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile + 1, tile))
    if starts[-1] + tile < size:
        starts.append(size - tile)
    return starts


def tile_grid(img_w: int, img_h: int, cfg: TilingConfig) -> list[BBox]:
    """Row-major tiles as inclusive pixel boxes.

    The last row and column are anchored flush with the image edge so every
    tile keeps the full size; an image smaller than a tile yields one tile
    covering the whole image.
    """
    tiles = []
    tw, th = min(cfg.tile_w, img_w), min(cfg.tile_h, img_h)
    for y in _axis_starts(img_h, cfg.tile_h):
        for x in _axis_starts(img_w, cfg.tile_w):
            tiles.append(BBox(x, y, x + tw - 1, y + th - 1))
    return tiles


def label_tiles(tiles, osteophytes, cfg: TilingConfig, scan_id: str = "") -> list[PatchRecord]:
    boxes = [point_to_box(o.location if isinstance(o, OsteophytePoint) else o,
                          cfg.annotation_half_extent) for o in osteophytes]
    out = []
    for t in tiles:
        present = any(bbox_intersects(t, b) for b in boxes)
        out.append(PatchRecord(
            patch_id=f"{scan_id}_{int(t.x0)}_{int(t.y0)}",
            scan_id=scan_id,
            method="tiling",
            crop=t,
            label="present" if present else "absent",
        ))
    return out


def _tile_scan(scan: ScanRecord, image_path: Path, cfg: TilingConfig, out_dir, split):
    img = load_image(image_path)
    records = []
    for rec in label_tiles(tile_grid(scan.width, scan.height, cfg), scan.osteophytes, cfg, scan.scan_id):
        rec = replace(rec, split=split)
        if out_dir is not None:
            dest = Path(out_dir) / "tiling" / rec.label / f"{rec.patch_id}.png"
            save_image(crop(img, pixel_window(rec.crop)), dest)
        records.append(rec)
    return records


def run_tiling(manifest: DatasetManifest, cfg: TilingConfig, out_dir=None, jobs: int = 1):
    """Tile every scan; returns ``(manifest, summary, failures)``.

    Crops land in ``out_dir/tiling/{present,absent}/{scan_id}_{x}_{y}.png``.
    A scan that cannot be read is recorded in ``failures`` and skipped.
    """
    if out_dir is not None:
        for label in ("present", "absent"):
            (Path(out_dir) / "tiling" / label).mkdir(parents=True, exist_ok=True)
    tasks = [(s, manifest.resolve(s.image_path), cfg, out_dir, manifest.split_of(s.scan_id))
             for s in manifest.scans]
    results, failures = run_per_scan(_tile_scan, tasks, jobs)
    failures = [(tasks[i][0].scan_id, msg) for i, msg in failures]
    patches = [p for recs in results for p in recs]
    summary = class_counts(patches)
    log.info("tiling: %d tiles, %d present", summary["total"], summary["present"])
    return manifest.with_patches("tiling", patches), summary, failures


def class_counts(patches) -> dict:
    present = sum(1 for p in patches if p.present)
    total = len(patches)
    return {
        "total": total,
        "present": present,
        "absent": total - present,
        "present_fraction": present / total if total else 0.0,
    }
