"""Grayscale rasters and the pixel transforms the pipeline needs.

Images are plain 2-D ``uint8`` numpy arrays indexed ``[row, col]``; binary
masks are 2-D ``bool`` arrays. ``width`` is ``shape[1]``.
"""
from __future__ import annotations

import io
import math
import os
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (EmptyCropError, EmptyMaskError, ImageIOError, ImageParseError,
                     InvalidArgumentError, UnsupportedDepthError)
from .geometry import BBox, Point, Polygon, points_in_polygon

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

CONTOUR_COLOR = (160, 32, 240)
POINT_COLOR = (255, 0, 0)
BOX_COLOR = (0, 255, 0)


def as_gray(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgumentError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise InvalidArgumentError(f"expected uint8 pixels, got {arr.dtype}")
    return arr


# --------------------------------------------------------------------------- I/O

def _parse_pgm(data: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    if not data.startswith(b"P5"):
        raise ImageParseError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    while len(tokens) < 3:
        if pos >= len(data):
            raise ImageParseError("truncated PGM header", pos)
        c = data[pos:pos + 1]
        if c.isspace():
            pos += 1
            continue
        if c == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageParseError("unterminated comment in PGM header", pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tok = data[start:pos]
        if not tok.isdigit():
            raise ImageParseError(f"bad PGM header token {tok!r}", start)
        tokens.append((int(tok), start))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageParseError("missing whitespace after PGM maxval", pos)
    pos += 1
    (width, w_at), (height, h_at), (maxval, m_at) = tokens
    if width < 1:
        raise ImageParseError(f"PGM width must be positive, got {width}", w_at)
    if height < 1:
        raise ImageParseError(f"PGM height must be positive, got {height}", h_at)
    if maxval != 255:
        raise UnsupportedDepthError(f"unsupported PGM maxval {maxval}; only 255 is accepted", m_at)
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ImageParseError(
            f"truncated PGM payload: expected {need} bytes, found {len(payload)}",
            pos + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def _load_png(path: Path, data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise UnsupportedDepthError(f"unsupported PNG mode {mode}; 8-bit only", 24)
            if mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            if mode in ("1", "P", "RGB", "RGBA", "LA"):
                return np.asarray(im.convert("L"), dtype=np.uint8).copy()
            raise UnsupportedDepthError(f"unsupported PNG mode {mode}", 24)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageParseError(f"cannot decode PNG {path}: {exc}", 8) from exc


def load_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(b"P5"):
        return _parse_pgm(data)
    if data.startswith(PNG_MAGIC):
        return _load_png(path, data)
    raise ImageParseError(f"{path}: unrecognised image format", 0)


def image_size(path) -> tuple[int, int]:
    """``(width, height)`` read from the header only."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head.startswith(b"P5"):
        # header is tiny, but the parser needs a payload; parse tokens directly
        toks = []
        for line in head.split(b"\n"):
            line = line.split(b"#", 1)[0]
            toks.extend(line.split())
            if len(toks) >= 4:
                break
        try:
            return int(toks[1]), int(toks[2])
        except (IndexError, ValueError) as exc:
            raise ImageParseError(f"{path}: bad PGM header", 0) from exc
    if head.startswith(PNG_MAGIC):
        with Image.open(path) as im:
            return im.size
    raise ImageParseError(f"{path}: unrecognised image format", 0)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_image(img, path) -> None:
    """Write PGM (P5) or PNG depending on the suffix. RGB arrays need PNG."""
    path = Path(path)
    arr = np.asarray(img)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        arr = as_gray(arr)
        h, w = arr.shape
        payload = b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()
    elif suffix == ".png":
        if arr.ndim == 3 and arr.shape[2] == 3 and arr.dtype == np.uint8:
            im = Image.fromarray(arr, mode="RGB")
        else:
            im = Image.fromarray(as_gray(arr), mode="L")
        buf = io.BytesIO()
        im.save(buf, format="PNG", compress_level=1)
        payload = buf.getvalue()
    else:
        raise ImageIOError(f"{path}: unsupported output suffix {suffix!r}")
    _atomic_write(path, payload)


# --------------------------------------------------------------------------- transforms

def pixel_window(box: BBox) -> BBox:
    """Half-open integer window holding every pixel centre inside a closed box."""
    return BBox(math.ceil(box.x0), math.ceil(box.y0),
                math.floor(box.x1) + 1, math.floor(box.y1) + 1)


def crop(img, box: BBox) -> np.ndarray:
    """Crop the half-open window ``[x0, x1) x [y0, y1)``, clamped to the image."""
    img = as_gray(img)
    h, w = img.shape
    x0 = max(0, math.floor(box.x0))
    y0 = max(0, math.floor(box.y0))
    x1 = min(w, math.ceil(box.x1))
    y1 = min(h, math.ceil(box.y1))
    if x1 <= x0 or y1 <= y0:
        raise EmptyCropError(f"crop {box} is empty on a {w}x{h} image")
    return img[y0:y1, x0:x1].copy()


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample ``img`` at float coordinates; outside ``[0, n-1]`` yields ``fill``."""
    h, w = img.shape
    eps = 1e-6
    valid = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.where(valid, out, fill)


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize (output corners sample input corners)."""
    img = as_gray(img)
    if out_w < 1 or out_h < 1:
        raise InvalidArgumentError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = img.shape
    if (w, h) == (out_w, out_h):
        return img.copy()
    sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    xs = np.arange(out_w) * sx if out_w > 1 else np.array([(w - 1) / 2])
    ys = np.arange(out_h) * sy if out_h > 1 else np.array([(h - 1) / 2])
    gx, gy = np.meshgrid(xs, ys)
    return _to_u8(_bilinear(img, gx, gy))


def equalize_histogram(img) -> np.ndarray:
    """Classic CDF remap ``round(255 * (cdf(v) - cdf_min) / (N - cdf_min))``.

    A single-level image has no spread to redistribute and is returned as is.
    """
    img = as_gray(img)
    n = img.size
    cdf = np.cumsum(np.bincount(img.ravel(), minlength=256))
    cdf_min = cdf[cdf > 0][0]
    if cdf_min == n:
        return img.copy()
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[img]


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate about the image centre, counter-clockwise as displayed.

    Bilinear sampling; pixels that map outside the source are 0.
    """
    img = as_gray(img)
    if abs(degrees) > 180:
        raise InvalidArgumentError(f"rotation must be within +-180 degrees, got {degrees}")
    if degrees == 0:
        return img.copy()
    h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    gx, gy = np.meshgrid(np.arange(w, dtype=float) - cx, np.arange(h, dtype=float) - cy)
    # inverse map: destination offset rotated clockwise (on screen) gives the source
    src_x = c * gx - s * gy + cx
    src_y = s * gx + c * gy + cy
    return _to_u8(_bilinear(img, src_x, src_y))


# --------------------------------------------------------------------------- masks

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
# clockwise on screen starting west: W, NW, N, NE, E, SE, S, SW as (dcol, drow)
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]


def largest_component(mask) -> np.ndarray:
    """Largest 4-connected foreground component; ties go to the earliest in raster order."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidArgumentError(f"mask must be 2-D, got shape {mask.shape}")
    labels, count = ndimage.label(mask, structure=_FOUR)
    if count == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def trace_mask_contour(mask) -> Polygon:
    """Moore-neighbour boundary trace of the largest component over pixel centres.

    Tracing stops by Jacob's criterion: back at the start pixel, entered the
    same way as the first time.
    """
    comp = largest_component(mask)
    h, w = comp.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = comp
    rows, cols = np.nonzero(padded)
    start = (int(cols[0]), int(rows[0]))  # top-most, then left-most
    # the west neighbour of a raster-first pixel is background
    back_dir = 0
    contour = [start]
    cur = start
    first_entry = None
    max_steps = 4 * comp.sum() + 8
    for _ in range(max_steps):
        found = None
        for k in range(1, 9):
            d = (back_dir + k) % 8
            nx, ny = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if padded[ny, nx]:
                found = (d, (nx, ny))
                break
        if found is None:  # isolated pixel
            break
        d, nxt = found
        # backtrack: the neighbour examined just before the hit, seen from nxt
        prev = (back_dir + k - 1) % 8
        px, py = cur[0] + _MOORE[prev][0], cur[1] + _MOORE[prev][1]
        entry = (cur, nxt)
        if first_entry is None:
            first_entry = entry
        elif entry == first_entry:
            break
        # direction from nxt to the backtrack pixel
        back_dir = _MOORE.index((px - nxt[0], py - nxt[1]))
        cur = nxt
        contour.append(cur)
    if len(contour) > 1 and contour[-1] == contour[0]:
        contour.pop()
    return Polygon([(x - 1, y - 1) for x, y in contour])


def fill_polygon(poly: Polygon, width: int, height: int) -> np.ndarray:
    """Rasterise a polygon's closed interior onto pixel centres."""
    if len(poly) < 3:
        mask = np.zeros((height, width), dtype=bool)
        for p in poly.vertices:
            c, r = int(round(p.x)), int(round(p.y))
            if 0 <= r < height and 0 <= c < width:
                mask[r, c] = True
        return mask
    arr = poly.as_array()
    c0 = max(0, math.floor(arr[:, 0].min()))
    c1 = min(width - 1, math.ceil(arr[:, 0].max()))
    r0 = max(0, math.floor(arr[:, 1].min()))
    r1 = min(height - 1, math.ceil(arr[:, 1].max()))
    mask = np.zeros((height, width), dtype=bool)
    if c1 < c0 or r1 < r0:
        return mask
    gx, gy = np.meshgrid(np.arange(c0, c1 + 1, dtype=float), np.arange(r0, r1 + 1, dtype=float))
    mask[r0:r1 + 1, c0:c1 + 1] = points_in_polygon(gx, gy, poly)
    return mask


# --------------------------------------------------------------------------- overlays

def _draw_segment(rgb, a: Point, b: Point, color) -> None:
    h, w = rgb.shape[:2]
    n = int(max(abs(b.x - a.x), abs(b.y - a.y))) + 1
    t = np.linspace(0.0, 1.0, n + 1)
    cols = np.rint(a.x + t * (b.x - a.x)).astype(int)
    rows = np.rint(a.y + t * (b.y - a.y)).astype(int)
    ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    rgb[rows[ok], cols[ok]] = color


def draw_overlay(img, polygons=(), points=(), boxes=(), point_radius: int = 2) -> np.ndarray:
    """Grayscale image expanded to RGB with contours, dots and box outlines burned in."""
    img = as_gray(img)
    rgb = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape
    for poly in polygons:
        verts = poly.vertices
        for i in range(len(verts)):
            _draw_segment(rgb, verts[i], verts[(i + 1) % len(verts)], CONTOUR_COLOR)
    for box in boxes:
        x0, y0 = int(round(box.x0)), int(round(box.y0))
        x1, y1 = int(round(box.x1)), int(round(box.y1))
        xs = np.arange(max(x0, 0), min(x1, w - 1) + 1)
        ys = np.arange(max(y0, 0), min(y1, h - 1) + 1)
        for y in (y0, y1):
            if 0 <= y < h and xs.size:
                rgb[y, xs] = BOX_COLOR
        for x in (x0, x1):
            if 0 <= x < w and ys.size:
                rgb[ys, x] = BOX_COLOR
    if points:
        gy, gx = np.mgrid[0:h, 0:w]
        for p in points:
            disk = (gx - p.x) ** 2 + (gy - p.y) ** 2 <= point_radius ** 2
            rgb[disk] = POINT_COLOR
    return rgb


def render_overlay(img, polygons, points, boxes, path, point_radius: int = 2) -> np.ndarray:
    rgb = draw_overlay(img, polygons, points, boxes, point_radius)
    save_image(rgb, path)
    return rgb
