"""Deterministic synthetic spine radiographs with ground-truth annotations.

A scan is a chain of bright rectangular vertebra bodies along a gently bent
spine axis over a dark noisy background. Osteophytes are small bright
half-disc bumps on the outside of body corners; their apex points are the
annotations. Per-vertebra masks cover the body only, never the bump, so a
raw contour never contains an osteophyte.

Bump placement per corner (image frame, +Y down); each bump sits a short
inset away from its corner so neighbouring vertebrae do not hide it:

* top-left, bottom-left: on the left edge, a quarter of the body height in
  from the corner, protruding outward (-X side)
* bottom-right: on the bottom edge, a fifth of the width in from the
  corner, protruding downward into the disc gap
* top-right: on the top edge, a quarter of the width in from the corner,
  protruding upward into the gap above; the topmost vertebra has no gap
  above and its top-right corner never gets one
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotations import (REGIONS, DatasetManifest, OsteophytePoint, ScanRecord,
                          VertebraAnnotation, q3)
from .errors import InvalidArgumentError
from .geometry import Point, Polygon
from .raster import fill_polygon, save_image
from .runner import run_per_scan

# vertebra width as a fraction of image width, and height/width aspect
_BODY_SCALE = {"cervical": (0.22, 0.50), "lumbar": (0.235, 0.45)}
_GAP_FRACTION = 0.2
_TR_INSET = 0.25
# bump offsets from the corner along the side and bottom edges
_SIDE_INSET = 0.25
_BOTTOM_INSET = 0.2

# intensity levels; bumps are the brightest structure so their rims give the
# steepest edges in a patch
BACKGROUND_LEVEL = 30.0
BODY_LEVEL = 110.0
RIM_BOOST = 15.0
BUMP_LEVEL = 250.0
TEXT_LEVEL = 235.0

_GLYPHS = {
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "L": ["10000", "10000", "10000", "10000", "10000", "10000", "11111"],
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
}


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_scans: int = 40
    region_mix: float = 0.5
    image_size: dict = field(default_factory=lambda: {"cervical": (731, 877), "lumbar": (1024, 1243)})
    vertebrae_per_scan: tuple = (5, 7)
    curvature: float = 25.0
    osteophyte_rate: float = 0.15
    bump_radius: float = 8.0
    noise_sigma: float = 6.0
    artifact_text_rate: float = 0.1
    image_format: str = "pgm"

    def __post_init__(self):
        for name in ("region_mix", "osteophyte_rate", "artifact_text_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must be in [0, 1], got {v}")
        if self.n_scans < 0:
            raise InvalidArgumentError(f"n_scans must be non-negative, got {self.n_scans}")
        lo, hi = self.vertebrae_per_scan
        if not 1 <= lo <= hi:
            raise InvalidArgumentError(f"bad vertebrae_per_scan range {self.vertebrae_per_scan}")
        for region in REGIONS:
            w, h = self.image_size[region]
            if w < 64 or h < 64:
                raise InvalidArgumentError(f"image_size[{region}] too small: {w}x{h}")
        if self.bump_radius <= 0 or self.noise_sigma < 0 or self.curvature < 0:
            raise InvalidArgumentError("bump_radius must be positive; noise and curvature non-negative")
        if self.image_format not in ("pgm", "png"):
            raise InvalidArgumentError(f"image_format must be pgm or png, got {self.image_format!r}")


@dataclass
class _Body:
    corners: dict  # tl, tr, br, bl -> np.ndarray(2)
    right: np.ndarray
    down: np.ndarray
    width: float

    def polygon(self) -> Polygon:
        c = self.corners
        return Polygon([tuple(c[k]) for k in ("tl", "tr", "br", "bl")])


def scan_regions(cfg: SynthConfig) -> list[str]:
    n_cerv = int(math.floor(cfg.n_scans * cfg.region_mix + 0.5))
    regions = np.array(["cervical"] * n_cerv + ["lumbar"] * (cfg.n_scans - n_cerv))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    return [str(r) for r in regions[rng.permutation(cfg.n_scans)]]


def _layout(rng, cfg: SynthConfig, region: str, w: int, h: int, n: int) -> list[_Body]:
    width_frac, aspect = _BODY_SCALE[region]
    vw = width_frac * w * rng.uniform(0.9, 1.1)
    vh = vw * aspect
    gap = _GAP_FRACTION * vw
    length = n * vh + (n - 1) * gap
    # axis tilt follows half a sine period; its amplitude never exceeds the
    # configured curvature
    amp = math.radians(cfg.curvature) * rng.uniform(0.25, 1.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    for _ in range(8):
        centres, angles = [], []
        pos = np.zeros(2)
        ds = 1.0
        s_centres = [(i * (vh + gap) + vh / 2) for i in range(n)]
        s = 0.0
        k = 0
        while k < n:
            phi = amp * math.sin(math.pi * s / length + phase)
            if s >= s_centres[k]:
                centres.append(pos.copy())
                angles.append(phi)
                k += 1
                continue
            pos += ds * np.array([math.sin(phi), math.cos(phi)])
            s += ds
        bodies = []
        for ctr, phi in zip(centres, angles):
            right = np.array([math.cos(phi), -math.sin(phi)])
            down = np.array([math.sin(phi), math.cos(phi)])
            jitter = rng.uniform(-0.02, 0.02, size=(4, 2)) * vw
            corners = {
                "tl": ctr - right * vw / 2 - down * vh / 2 + jitter[0],
                "tr": ctr + right * vw / 2 - down * vh / 2 + jitter[1],
                "br": ctr + right * vw / 2 + down * vh / 2 + jitter[2],
                "bl": ctr - right * vw / 2 + down * vh / 2 + jitter[3],
            }
            bodies.append(_Body(corners, right, down, vw))
        pts = np.array([c for b in bodies for c in b.corners.values()])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = hi - lo
        margin = 2 * cfg.bump_radius + 12
        if span[0] <= w - 2 * margin and span[1] <= h - 2 * margin:
            break
        amp *= 0.6
    else:
        raise InvalidArgumentError(f"cannot fit {n} vertebrae into a {w}x{h} {region} scan")
    slack_x = w - 2 * margin - span[0]
    offset = np.array([margin + rng.uniform(0.3, 0.7) * slack_x,
                       margin + 0.5 * (h - 2 * margin - span[1])]) - lo
    for b in bodies:
        for key in b.corners:
            b.corners[key] = b.corners[key] + offset
    return bodies


def _bump_site(body: _Body, corner: str, r: float):
    """Bump centre on the body edge and the outward unit direction."""
    c = body.corners
    side_inset = max(r + 2, _SIDE_INSET * body.width * _height_ratio(body))
    if corner == "tl":
        return c["tl"] + body.down * side_inset, -body.right
    if corner == "bl":
        return c["bl"] - body.down * side_inset, -body.right
    if corner == "br":
        return c["br"] - body.right * max(r + 2, _BOTTOM_INSET * body.width), body.down
    return c["tr"] - body.right * (_TR_INSET * body.width), -body.down


def _height_ratio(body: _Body) -> float:
    return float(np.linalg.norm(body.corners["bl"] - body.corners["tl"])) / body.width


def _text_artifact(rng, canvas: np.ndarray) -> None:
    h, w = canvas.shape
    text = "".join(rng.choice(list(_GLYPHS), size=int(rng.integers(1, 4))))
    scale = int(rng.integers(3, 6))
    tw, th = len(text) * 6 * scale, 7 * scale
    x0 = 15 if rng.random() < 0.5 else w - tw - 15
    y0 = int(rng.integers(15, max(16, h // 6)))
    for i, ch in enumerate(text):
        glyph = np.array([[int(b) for b in row] for row in _GLYPHS[ch]], dtype=bool)
        block = np.kron(glyph, np.ones((scale, scale), dtype=bool))
        gx = x0 + i * 6 * scale
        sub = canvas[y0:y0 + th, gx:gx + 5 * scale]
        sub[block[:sub.shape[0], :sub.shape[1]]] = TEXT_LEVEL


def generate_scan(cfg: SynthConfig, index: int, region: str, out_dir: Path) -> ScanRecord:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    scan_id = f"scan{index:04d}"
    w, h = cfg.image_size[region]
    lo, hi = cfg.vertebrae_per_scan
    n = int(rng.integers(lo, hi + 1))
    bodies = _layout(rng, cfg, region, w, h, n)

    yy = np.linspace(-1.0, 1.0, h)[:, None]
    canvas = np.full((h, w), BACKGROUND_LEVEL) + 8.0 * yy + np.zeros((1, w))
    masks = []
    for b in bodies:
        mask = fill_polygon(b.polygon(), w, h)
        rim = mask & ~ndimage.binary_erosion(mask, iterations=3)
        canvas[mask] = BODY_LEVEL + rng.uniform(-10, 10)
        canvas[rim] += RIM_BOOST
        masks.append(mask)

    r = cfg.bump_radius
    gy, gx = np.mgrid[0:h, 0:w]
    vertebrae, osteophytes = [], []
    for i, b in enumerate(bodies):
        vid = f"v{i}"
        c = b.corners
        left_mid = (c["tl"] + c["bl"]) / 2
        right_mid = (c["tr"] + c["br"]) / 2
        six = [c["tl"], c["tr"], right_mid, c["br"], c["bl"], left_mid]
        vertebrae.append(VertebraAnnotation(vid, tuple(Point(q3(p[0]), q3(p[1])) for p in six), region))
        for corner in ("tl", "tr", "br", "bl"):
            # one draw per corner keeps the stream aligned whatever the eligibility
            hit = rng.random() < cfg.osteophyte_rate
            if not hit or (corner == "tr" and i == 0):
                continue
            centre, outward = _bump_site(b, corner, r)
            x0, x1 = int(centre[0] - r - 1), int(centre[0] + r + 2)
            y0, y1 = int(centre[1] - r - 1), int(centre[1] + r + 2)
            win = (slice(max(y0, 0), y1), slice(max(x0, 0), x1))
            disk = (gx[win] - centre[0]) ** 2 + (gy[win] - centre[1]) ** 2 <= r * r
            # the outgrowth only shows outside its own body
            disk &= ~masks[i][win]
            canvas[win][disk] = BUMP_LEVEL
            apex = centre + outward * r
            osteophytes.append(OsteophytePoint(Point(q3(apex[0]), q3(apex[1])), vid))

    if rng.random() < cfg.artifact_text_rate:
        _text_artifact(rng, canvas)
    if cfg.noise_sigma > 0:
        canvas += rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    img = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    image_rel = f"images/{scan_id}.{cfg.image_format}"
    save_image(img, out_dir / image_rel)
    mask_rels = []
    for i, mask in enumerate(masks):
        rel = f"masks/{scan_id}_v{i}.png"
        save_image(mask.astype(np.uint8) * 255, out_dir / rel)
        mask_rels.append(rel)
    return ScanRecord(scan_id, image_rel, region, w, h, tuple(vertebrae), tuple(osteophytes),
                      tuple(mask_rels))


def generate(cfg: SynthConfig, out_dir, jobs: int = 1) -> DatasetManifest:
    """Render the corpus under ``out_dir`` and return its (unsplit) manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, i, region, out_dir) for i, region in enumerate(scan_regions(cfg))]
    scans, failures = run_per_scan(generate_scan, tasks, jobs)
    if failures:
        raise OSError("; ".join(msg for _, msg in failures))
    return DatasetManifest(scans=tuple(scans), base_dir=out_dir.resolve())


def eligible_corners(manifest: DatasetManifest) -> int:
    """Corners that can carry a bump: four per vertebra minus one per scan."""
    return sum(4 * len(s.vertebrae) - (1 if s.vertebrae else 0) for s in manifest.scans)


def _summary(values) -> dict:
    if not values:
        return {"min": 0, "max": 0, "mean": 0.0}
    return {"min": min(values), "max": max(values), "mean": sum(values) / len(values)}


def corpus_stats(manifest: DatasetManifest) -> dict:
    scans = sorted(manifest.scans, key=lambda s: s.scan_id)
    per_region = {r: 0 for r in REGIONS}
    osteo_region = {r: 0 for r in REGIONS}
    for s in scans:
        per_region[s.region] += 1
        osteo_region[s.region] += len(s.osteophytes)
    patches = {}
    for p in manifest.patches or ():
        d = patches.setdefault(p.method, {"present": 0, "absent": 0})
        d[p.label] += 1
    return {
        "scans": len(scans),
        "scans_by_region": per_region,
        "vertebrae": sum(len(s.vertebrae) for s in scans),
        "vertebrae_per_scan": _summary([len(s.vertebrae) for s in scans]),
        "osteophytes": sum(len(s.osteophytes) for s in scans),
        "osteophytes_by_region": osteo_region,
        "osteophytes_per_scan": _summary([len(s.osteophytes) for s in scans]),
        "patches": {m: patches[m] for m in sorted(patches)},
    }
