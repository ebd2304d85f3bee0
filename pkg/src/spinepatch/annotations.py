"""Dataset schema, the JSON manifest format, and the train/test split.

The manifest is the pipeline's interchange file. Paths inside it are POSIX
strings relative to the manifest's own directory so a corpus can be moved
as a unit.
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidGeometryError, ManifestError, SplitError
from .geometry import BBox, Point, Polygon

MANIFEST_VERSION = 1
REGIONS = ("cervical", "lumbar")
METHODS = ("tiling", "segpatch")
LABELS = ("present", "absent")
SPLITS = ("train", "test")
POINTS_PER_VERTEBRA = 6


def q3(v: float) -> float:
    """Round to the manifest's 3-decimal precision."""
    r = round(float(v), 3)
    return 0.0 if r == 0 else r


@dataclass(frozen=True)
class VertebraAnnotation:
    vertebra_id: str
    points: tuple[Point, ...]
    region: str


@dataclass(frozen=True)
class OsteophytePoint:
    location: Point
    vertebra_id: Optional[str] = None


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    image_path: str
    region: str
    width: int
    height: int
    vertebrae: tuple[VertebraAnnotation, ...] = ()
    osteophytes: tuple[OsteophytePoint, ...] = ()
    mask_paths: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    scan_id: str
    method: str
    crop: BBox
    label: str
    source_vertebra: Optional[str] = None
    split: Optional[str] = None

    @property
    def present(self) -> bool:
        return self.label == "present"


@dataclass(frozen=True)
class DatasetManifest:
    version: int = MANIFEST_VERSION
    scans: tuple[ScanRecord, ...] = ()
    splits: dict = field(default_factory=dict)
    patches: Optional[tuple[PatchRecord, ...]] = None
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()

    def scan(self, scan_id: str) -> ScanRecord:
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise KeyError(scan_id)

    def split_of(self, scan_id: str) -> Optional[str]:
        for name, ids in self.splits.items():
            if scan_id in ids:
                return name
        return None

    def patches_for(self, method: str) -> list[PatchRecord]:
        return [p for p in (self.patches or ()) if p.method == method]

    def with_patches(self, method: str, new: list[PatchRecord]) -> "DatasetManifest":
        """Replace every patch of ``method``; other methods' patches are kept."""
        kept = [p for p in (self.patches or ()) if p.method != method]
        merged = sorted(kept + list(new), key=lambda p: (p.method, p.scan_id, p.patch_id))
        return replace(self, patches=tuple(merged))


# --------------------------------------------------------------------------- geometry of annotations

def vertebra_polygon(ann: VertebraAnnotation) -> Polygon:
    """Order the annotation's points by angle about their mean into a hexagon."""
    pts = np.array([(p.x, p.y) for p in ann.points], dtype=float)
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-9) < 2:
        raise InvalidGeometryError(
            f"vertebra {ann.vertebra_id!r}: points are collinear")
    angles = np.arctan2(centred[:, 1], centred[:, 0])
    radii = np.hypot(centred[:, 0], centred[:, 1])
    order = np.lexsort((radii, angles))
    return Polygon([ann.points[i] for i in order])


def nearest_vertebra(scan: ScanRecord, p: Point) -> Optional[str]:
    """Vertebra whose point-centroid lies closest to ``p``."""
    best, best_d = None, math.inf
    for v in scan.vertebrae:
        cx = sum(q.x for q in v.points) / len(v.points)
        cy = sum(q.y for q in v.points) / len(v.points)
        d = math.hypot(p.x - cx, p.y - cy)
        if d < best_d:
            best, best_d = v.vertebra_id, d
    return best


def osteophyte_owner(scan: ScanRecord, o: OsteophytePoint) -> Optional[str]:
    return o.vertebra_id if o.vertebra_id is not None else nearest_vertebra(scan, o.location)


# --------------------------------------------------------------------------- parsing

class _Reader:
    """Strict field access with path-aware error messages."""

    def __init__(self, obj, path, scan_id=None):
        self.obj = obj
        self.path = path
        self.scan_id = scan_id

    def fail(self, msg, sub=None):
        loc = self.path if sub is None else f"{self.path}.{sub}"
        raise ManifestError(msg, location=loc, scan_id=self.scan_id)

    def expect_object(self, required, optional=()):
        if not isinstance(self.obj, dict):
            self.fail(f"expected an object, got {type(self.obj).__name__}")
        unknown = sorted(set(self.obj) - set(required) - set(optional))
        if unknown:
            self.fail(f"unknown field(s) {', '.join(map(repr, unknown))}")
        missing = [k for k in required if k not in self.obj]
        if missing:
            self.fail(f"missing required field(s) {', '.join(map(repr, missing))}")
        return self

    def str(self, key, optional=False):
        v = self.obj.get(key)
        if v is None and optional:
            return None
        if not isinstance(v, str) or not v:
            self.fail("expected a non-empty string", key)
        return v

    def int(self, key):
        v = self.obj.get(key)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail("expected an integer", key)
        return v

    def enum(self, key, allowed, optional=False):
        v = self.str(key, optional=optional)
        if v is not None and v not in allowed:
            self.fail(f"expected one of {list(allowed)}, got {v!r}", key)
        return v

    def list(self, key, optional=False):
        v = self.obj.get(key)
        if v is None and optional:
            return None
        if not isinstance(v, list):
            self.fail("expected a list", key)
        return v

    def child(self, key, index=None):
        obj = self.obj[key] if index is None else self.obj[key][index]
        path = f"{self.path}.{key}" if index is None else f"{self.path}.{key}[{index}]"
        return _Reader(obj, path, self.scan_id)


def _number(reader: _Reader, value, where) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        reader.fail("expected a finite number", where)
    return float(value)


def _point(reader: _Reader, value, where) -> Point:
    if not isinstance(value, list) or len(value) != 2:
        reader.fail("expected an [x, y] pair", where)
    return Point(_number(reader, value[0], where), _number(reader, value[1], where))


def _in_bounds(p: Point, width: int, height: int) -> bool:
    return 0 <= p.x <= width - 1 and 0 <= p.y <= height - 1


def _parse_scan(obj, index: int, base_dir: Path, verify_images: bool) -> ScanRecord:
    r = _Reader(obj, f"scans[{index}]")
    r.expect_object(("scan_id", "image_path", "region", "width", "height",
                     "vertebrae", "osteophytes"), ("mask_paths",))
    scan_id = r.str("scan_id")
    r.scan_id = scan_id
    region = r.enum("region", REGIONS)
    width, height = r.int("width"), r.int("height")
    if width < 1 or height < 1:
        r.fail("image dimensions must be positive", "width")
    image_path = r.str("image_path")

    vertebrae = []
    seen = set()
    for i, v in enumerate(r.list("vertebrae")):
        vr = r.child("vertebrae", i).expect_object(("vertebra_id", "points", "region"))
        vid = vr.str("vertebra_id")
        if vid in seen:
            vr.fail(f"duplicate vertebra_id {vid!r}", "vertebra_id")
        seen.add(vid)
        vregion = vr.enum("region", REGIONS)
        if vregion != region:
            vr.fail(f"vertebra region {vregion!r} differs from scan region {region!r}", "region")
        raw = vr.list("points")
        if len(raw) != POINTS_PER_VERTEBRA:
            vr.fail(f"each vertebra must be delineated by six pixel points, got {len(raw)}",
                    "points")
        pts = tuple(_point(vr, p, f"points[{k}]") for k, p in enumerate(raw))
        for k, p in enumerate(pts):
            if not _in_bounds(p, width, height):
                vr.fail(f"point ({p.x}, {p.y}) outside the {width}x{height} scan", f"points[{k}]")
        vertebrae.append(VertebraAnnotation(vid, pts, vregion))

    osteophytes = []
    for i, o in enumerate(r.list("osteophytes")):
        orr = r.child("osteophytes", i).expect_object(("location",), ("vertebra_id",))
        loc = _point(orr, orr.obj["location"], "location")
        if not _in_bounds(loc, width, height):
            orr.fail(f"osteophyte ({loc.x}, {loc.y}) outside the {width}x{height} scan", "location")
        vid = orr.str("vertebra_id", optional=True)
        if vid is not None and vid not in seen:
            orr.fail(f"unknown vertebra_id {vid!r}", "vertebra_id")
        osteophytes.append(OsteophytePoint(loc, vid))

    mask_paths = r.list("mask_paths", optional=True)
    if mask_paths is not None:
        if len(mask_paths) != len(vertebrae):
            r.fail(f"expected {len(vertebrae)} mask paths (one per vertebra), got {len(mask_paths)}",
                   "mask_paths")
        for k, m in enumerate(mask_paths):
            if not isinstance(m, str) or not m:
                r.fail("expected a non-empty string", f"mask_paths[{k}]")
        mask_paths = tuple(mask_paths)

    if verify_images:
        from .raster import image_size
        img = base_dir / image_path
        if img.exists():
            w, h = image_size(img)
            if (w, h) != (width, height):
                r.fail(f"image file is {w}x{h} but the manifest says {width}x{height}", "width")

    return ScanRecord(scan_id, image_path, region, width, height,
                      tuple(vertebrae), tuple(osteophytes), mask_paths)


def _parse_patch(obj, index: int, known: dict) -> PatchRecord:
    r = _Reader(obj, f"patches[{index}]")
    r.expect_object(("patch_id", "scan_id", "method", "crop", "label"),
                    ("source_vertebra", "split"))
    scan_id = r.str("scan_id")
    if scan_id not in known:
        r.fail(f"patch refers to unknown scan_id {scan_id!r}", "scan_id")
    r.scan_id = scan_id
    raw = r.list("crop")
    if len(raw) != 4:
        r.fail("crop must be [x0, y0, x1, y1]", "crop")
    vals = [_number(r, v, "crop") for v in raw]
    if vals[0] > vals[2] or vals[1] > vals[3]:
        r.fail("crop is inverted", "crop")
    source = r.str("source_vertebra", optional=True)
    if source is not None and source not in known[scan_id]:
        r.fail(f"unknown source_vertebra {source!r}", "source_vertebra")
    return PatchRecord(
        patch_id=r.str("patch_id"),
        scan_id=scan_id,
        method=r.enum("method", METHODS),
        crop=BBox(*vals),
        label=r.enum("label", LABELS),
        source_vertebra=source,
        split=r.enum("split", SPLITS, optional=True),
    )


def manifest_from_dict(data, base_dir: Path = Path("."), verify_images: bool = True) -> DatasetManifest:
    r = _Reader(data, "$")
    r.expect_object(("version", "scans", "splits"), ("patches",))
    version = r.int("version")
    if version != MANIFEST_VERSION:
        r.fail(f"unsupported manifest version {version}; expected {MANIFEST_VERSION}", "version")
    scans = [_parse_scan(s, i, base_dir, verify_images) for i, s in enumerate(r.list("scans"))]
    known = {}
    for s in scans:
        if s.scan_id in known:
            raise ManifestError("duplicate scan_id", location="scans", scan_id=s.scan_id)
        known[s.scan_id] = {v.vertebra_id for v in s.vertebrae}

    splits_obj = data["splits"]
    if not isinstance(splits_obj, dict):
        r.fail("expected an object", "splits")
    splits = {}
    owner = {}
    for name in sorted(splits_obj):
        ids = splits_obj[name]
        if not isinstance(ids, list) or not all(isinstance(i, str) for i in ids):
            r.fail("expected a list of scan ids", f"splits.{name}")
        for sid in ids:
            if sid not in known:
                raise ManifestError(f"split {name!r} references unknown scan_id",
                                    location=f"splits.{name}", scan_id=sid)
            if sid in owner:
                raise ManifestError(f"scan appears in both {owner[sid]!r} and {name!r}",
                                    location=f"splits.{name}", scan_id=sid)
            owner[sid] = name
        splits[name] = tuple(ids)

    patches = r.list("patches", optional=True)
    if patches is not None:
        patches = tuple(_parse_patch(p, i, known) for i, p in enumerate(patches))
        ids = [p.patch_id for p in patches]
        if len(set(ids)) != len(ids):
            r.fail("duplicate patch_id", "patches")
    return DatasetManifest(version, tuple(scans), splits, patches, base_dir)


def parse_manifest(path, verify_images: bool = True) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"JSON syntax error: {exc.msg}",
                            location=f"{path}:{exc.lineno}:{exc.colno}") from exc
    return manifest_from_dict(data, path.resolve().parent, verify_images)


# --------------------------------------------------------------------------- writing

class _Fixed(float):
    """Float that serialises with exactly three decimals."""


def _fmt(v, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(v, _Fixed):
        s = f"{float(v):.3f}"
        return "0.000" if s == "-0.000" else s
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_fmt(v[k], indent, level + 1)}" for k in sorted(v)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple)):
        if not v:
            return "[]"
        if all(isinstance(x, _Fixed) for x in v):
            return "[" + ", ".join(_fmt(x, indent, level) for x in v) + "]"
        items = [pad + _fmt(x, indent, level + 1) for x in v]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    return json.dumps(v)


def _pt(p: Point):
    return [_Fixed(p.x), _Fixed(p.y)]


def manifest_to_dict(m: DatasetManifest) -> dict:
    scans = []
    for s in sorted(m.scans, key=lambda s: s.scan_id):
        d = {
            "scan_id": s.scan_id,
            "image_path": s.image_path,
            "region": s.region,
            "width": s.width,
            "height": s.height,
            "vertebrae": [{"vertebra_id": v.vertebra_id, "region": v.region,
                           "points": [_pt(p) for p in v.points]} for v in s.vertebrae],
            "osteophytes": [{"location": _pt(o.location), "vertebra_id": o.vertebra_id}
                            for o in s.osteophytes],
        }
        if s.mask_paths is not None:
            d["mask_paths"] = list(s.mask_paths)
        scans.append(d)
    out = {
        "version": m.version,
        "scans": scans,
        "splits": {k: sorted(v) for k, v in m.splits.items()},
    }
    if m.patches is not None:
        out["patches"] = [{
            "patch_id": p.patch_id,
            "scan_id": p.scan_id,
            "method": p.method,
            "crop": [_Fixed(p.crop.x0), _Fixed(p.crop.y0), _Fixed(p.crop.x1), _Fixed(p.crop.y1)],
            "label": p.label,
            "source_vertebra": p.source_vertebra,
            "split": p.split,
        } for p in sorted(m.patches, key=lambda p: (p.method, p.scan_id, p.patch_id))]
    return out


def dumps_manifest(m: DatasetManifest) -> str:
    return _fmt(manifest_to_dict(m), 2, 0) + "\n"


def write_manifest(m: DatasetManifest, path) -> None:
    """Deterministic, atomic write (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(dumps_manifest(m), encoding="utf-8")
    os.replace(tmp, path)


# --------------------------------------------------------------------------- splitting

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(m: DatasetManifest, train_fraction: float = 0.75, seed: int = 0) -> DatasetManifest:
    """Scan-level split stratified by region; patches inherit their scan's split."""
    if len(m.scans) < 4:
        raise SplitError(f"need at least 4 scans to split, got {len(m.scans)}")
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_region = defaultdict(list)
    for s in m.scans:
        by_region[s.region].append(s.scan_id)
    train, test = [], []
    for region in sorted(by_region):
        ids = sorted(by_region[region])
        perm = rng.permutation(len(ids))
        n_train = _round_half_up(train_fraction * len(ids))
        train += [ids[i] for i in perm[:n_train]]
        test += [ids[i] for i in perm[n_train:]]
    splits = {"train": tuple(sorted(train)), "test": tuple(sorted(test))}
    out = replace(m, splits=splits)
    if m.patches is not None:
        out = replace(out, patches=tuple(replace(p, split=out.split_of(p.scan_id)) for p in m.patches))
    return out


# --------------------------------------------------------------------------- CSV import

CSV_COLUMNS = ("scan_id", "kind", "index", "x", "y", "region")


def import_csv(csv_path, image_dir, manifest_dir) -> DatasetManifest:
    """Build a manifest from a flat point list.

    Rows with ``kind == "vertebra_pt"`` are grouped by ``index // 6`` into
    vertebrae ``v0, v1, ...``; the six points of a vertebra are ordered by
    ``index % 6``. ``kind == "osteophyte"`` rows become osteophyte points.
    Each scan's image is looked up as ``{scan_id}.pgm`` or ``{scan_id}.png``
    in ``image_dir``.
    """
    from .raster import image_size

    csv_path, image_dir, manifest_dir = Path(csv_path), Path(image_dir), Path(manifest_dir)
    rows = defaultdict(list)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ManifestError(f"CSV header must be {','.join(CSV_COLUMNS)}",
                                location=f"{csv_path}:1")
        for lineno, row in enumerate(reader, start=2):
            where = f"{csv_path}:{lineno}"
            if row["kind"] not in ("vertebra_pt", "osteophyte"):
                raise ManifestError(f"unknown kind {row['kind']!r}", location=where)
            if row["region"] not in REGIONS:
                raise ManifestError(f"unknown region {row['region']!r}", location=where)
            try:
                idx, x, y = int(row["index"]), float(row["x"]), float(row["y"])
            except ValueError as exc:
                raise ManifestError(f"bad number: {exc}", location=where) from exc
            rows[row["scan_id"]].append((row["kind"], idx, q3(x), q3(y), row["region"], where))

    scans = []
    for scan_id in sorted(rows):
        entries = rows[scan_id]
        regions = {e[4] for e in entries}
        if len(regions) != 1:
            raise ManifestError("mixed regions in one scan", scan_id=scan_id)
        region = regions.pop()
        img = next((image_dir / f"{scan_id}{ext}" for ext in (".pgm", ".png")
                    if (image_dir / f"{scan_id}{ext}").exists()), None)
        if img is None:
            raise FileNotFoundError(f"no image for scan {scan_id!r} in {image_dir}")
        w, h = image_size(img)
        groups = defaultdict(dict)
        osteo = []
        for kind, idx, x, y, _, where in entries:
            if kind == "vertebra_pt":
                groups[idx // POINTS_PER_VERTEBRA][idx % POINTS_PER_VERTEBRA] = Point(x, y)
            else:
                osteo.append((idx, Point(x, y)))
        vertebrae = []
        for g in sorted(groups):
            pts = groups[g]
            vertebrae.append(VertebraAnnotation(
                f"v{g}", tuple(pts[k] for k in sorted(pts)), region))
        rel = os.path.relpath(img.resolve(), manifest_dir.resolve())
        scans.append(ScanRecord(scan_id, Path(rel).as_posix(), region, w, h, tuple(vertebrae),
                                tuple(OsteophytePoint(p) for _, p in sorted(osteo, key=lambda t: t[0]))))
    m = DatasetManifest(scans=tuple(scans), base_dir=manifest_dir.resolve())
    # run the parser's validation on the assembled data
    return manifest_from_dict(json.loads(dumps_manifest(m)), manifest_dir.resolve())
