"""Floor-plan rasters, coordinate transforms and the AP-to-MD crop.

World coordinates are meters. Raster pixel coordinates are continuous
``(x, y)`` = (column, row); the pixel with integer indices ``(c, r)`` covers
``[c, c+1) x [r, r+1)``. With ``y_axis == "down"`` world +y runs down the
raster, otherwise up.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

BORDER_VALUE = 1.0
FREE_THRESHOLD = 0.5


@dataclass(frozen=True)
class FloorPlan:
    raster: np.ndarray
    pixels_per_meter: float
    origin_px: tuple
    walls: np.ndarray
    extent_m: tuple
    y_axis: str = "down"

    def __post_init__(self):
        raster = np.asarray(self.raster, dtype=np.float64)
        if raster.ndim != 2 or raster.size == 0:
            raise ValueError("empty raster")
        if not self.pixels_per_meter > 0:
            raise ValueError(f"pixels_per_meter must be positive, got {self.pixels_per_meter}")
        if self.y_axis not in ("down", "up"):
            raise ValueError(f"y_axis must be 'down' or 'up', got {self.y_axis!r}")
        rows, cols = raster.shape
        w, h = self.extent_m
        if abs(cols - w * self.pixels_per_meter) > 1 or abs(rows - h * self.pixels_per_meter) > 1:
            raise ValueError(f"raster {cols}x{rows} px inconsistent with extent {w}x{h} m "
                             f"at {self.pixels_per_meter} px/m")
        if raster.min() < 0 or raster.max() > 1:
            raise ValueError("raster intensities must lie in [0, 1]")
        walls = np.asarray(self.walls, dtype=np.float64).reshape(-1, 4)
        raster.setflags(write=False)
        walls.setflags(write=False)
        object.__setattr__(self, "raster", raster)
        object.__setattr__(self, "walls", walls)
        object.__setattr__(self, "origin_px", (float(self.origin_px[0]), float(self.origin_px[1])))
        object.__setattr__(self, "extent_m", (float(w), float(h)))
        x0, y0, x1, y1 = self.bounds
        tol = 1e-9
        if len(walls) and (walls[:, [0, 2]].min() < x0 - tol or walls[:, [0, 2]].max() > x1 + tol
                           or walls[:, [1, 3]].min() < y0 - tol or walls[:, [1, 3]].max() > y1 + tol):
            raise ValueError("wall segment outside the floor-plan extent")

    @property
    def bounds(self):
        """World bounding box ``(xmin, ymin, xmax, ymax)``."""
        ppm = self.pixels_per_meter
        ox, oy = self.origin_px
        w, h = self.extent_m
        xmin = -ox / ppm
        if self.y_axis == "down":
            ymin = -oy / ppm
        else:
            ymin = oy / ppm - h
        return (xmin, ymin, xmin + w, ymin + h)

    @property
    def diameter_m(self):
        return float(math.hypot(*self.extent_m))

    def contains(self, p, tol=1e-9):
        x0, y0, x1, y1 = self.bounds
        return x0 - tol <= p[0] <= x1 + tol and y0 - tol <= p[1] <= y1 + tol

    def clamp(self, p):
        x0, y0, x1, y1 = self.bounds
        return (min(max(float(p[0]), x0), x1), min(max(float(p[1]), y0), y1))

    def world_to_pixel_array(self, pts):
        """Vectorized world -> pixel map without extent checks; ``pts`` is ``(..., 2)``."""
        pts = np.asarray(pts, dtype=np.float64)
        ppm = self.pixels_per_meter
        ox, oy = self.origin_px
        px = ox + pts[..., 0] * ppm
        py = oy + pts[..., 1] * ppm if self.y_axis == "down" else oy - pts[..., 1] * ppm
        return np.stack([px, py], axis=-1)

    def sample(self, pts):
        """Nearest-pixel raster values at world points; points off the raster read as free space."""
        pix = self.world_to_pixel_array(pts)
        col = np.floor(pix[..., 0]).astype(np.intp)
        row = np.floor(pix[..., 1]).astype(np.intp)
        rows, cols = self.raster.shape
        inside = (col >= 0) & (col < cols) & (row >= 0) & (row < rows)
        out = np.full(col.shape, BORDER_VALUE)
        out[inside] = self.raster[row[inside], col[inside]]
        return out

    def sample_bilinear(self, pts):
        pix = self.world_to_pixel_array(pts) - 0.5
        rows, cols = self.raster.shape
        padded = np.pad(self.raster, 1, constant_values=BORDER_VALUE)
        x = np.clip(pix[..., 0] + 1, 0, cols + 1 - 1e-9)
        y = np.clip(pix[..., 1] + 1, 0, rows + 1 - 1e-9)
        c0 = np.floor(x).astype(np.intp)
        r0 = np.floor(y).astype(np.intp)
        c1 = np.minimum(c0 + 1, cols + 1)
        r1 = np.minimum(r0 + 1, rows + 1)
        fx, fy = x - c0, y - r0
        top = padded[r0, c0] * (1 - fx) + padded[r0, c1] * fx
        bot = padded[r1, c0] * (1 - fx) + padded[r1, c1] * fx
        return top * (1 - fy) + bot * fy

    def free_mask(self):
        return self.raster > FREE_THRESHOLD


def world_to_pixel(fp, p):
    """Map a world point (meters) to continuous pixel coordinates."""
    if not fp.contains(p):
        raise ValueError(f"point {tuple(p)} outside floor-plan extent {fp.bounds}")
    px, py = fp.world_to_pixel_array(np.asarray(p, dtype=np.float64))
    return (float(px), float(py))


def pixel_to_world(fp, px):
    ppm = fp.pixels_per_meter
    ox, oy = fp.origin_px
    x = (px[0] - ox) / ppm
    y = (px[1] - oy) / ppm if fp.y_axis == "down" else (oy - px[1]) / ppm
    return (x, y)


# ---------------------------------------------------------------------------
# crops


@dataclass(frozen=True)
class CropConfig:
    """Crop geometry. ``height_px`` is the across-axis size, ``patch`` the width quantum."""

    height_px: int = 256
    patch: int = 32
    margin_m: float = 0.0
    mode: str = "nearest"


@dataclass(frozen=True)
class CroppedImage:
    """Rotated crop; ``pixels[x, y]`` with x along the AP to MD axis, shape ``(W, H)``."""

    pixels: np.ndarray
    ap_anchor_px: tuple
    md_anchor_px: tuple
    rotation_deg: float
    clamped: bool = False
    origin_m: tuple = field(default=(0.0, 0.0))
    axis_u: tuple = field(default=(1.0, 0.0))
    pixels_per_meter: float = 64.0

    @property
    def width_px(self):
        return self.pixels.shape[0]

    @property
    def height_px(self):
        return self.pixels.shape[1]

    def to_world(self, px):
        """Inverse of the crop transform, for continuous crop pixel coordinates."""
        ux, uy = self.axis_u
        s = px[0] / self.pixels_per_meter
        t = (px[1] - self.height_px / 2) / self.pixels_per_meter
        return (self.origin_m[0] + s * ux - t * uy, self.origin_m[1] + s * uy + t * ux)


def crop_width_px(distance_m, ppm, cfg):
    length_px = (distance_m + 2 * cfg.margin_m) * ppm
    n = max(1, math.ceil(length_px / cfg.patch - 1e-9))
    return n * cfg.patch


def crop_grid(ap, md, ppm, cfg):
    """World sample points ``(W, H, 2)`` of the crop plus its frame (origin, unit axis, width)."""
    ap = np.asarray(ap, dtype=np.float64)
    md = np.asarray(md, dtype=np.float64)
    delta = md - ap
    d = float(math.hypot(delta[0], delta[1]))
    if d <= 0:
        raise ValueError("AP and MD locations coincide")
    u = delta / d
    v = np.array([-u[1], u[0]])
    w_px = crop_width_px(d, ppm, cfg)
    origin = ap - cfg.margin_m * u
    s = (np.arange(w_px) + 0.5) / ppm
    t = (np.arange(cfg.height_px) + 0.5 - cfg.height_px / 2) / ppm
    pts = (origin[None, None, :] + s[:, None, None] * u[None, None, :]
           + t[None, :, None] * v[None, None, :])
    return pts, origin, u, d


def crop_and_rotate(fp, md_estimate, ap_location, cfg=CropConfig()):
    """Crop the plan between an AP and an MD with the AP to MD axis pointing right.

    The AP sits on the left edge's vertical midline (offset by ``margin_m``);
    the MD lies ``distance * pixels_per_meter`` pixels to its right. The width
    is padded past the MD up to a multiple of ``cfg.patch``. Samples off the
    raster read as free space. An MD estimate outside the plan is clamped to
    the nearest in-plan point and flagged.
    """
    if not fp.contains(ap_location):
        raise ValueError(f"AP location {tuple(ap_location)} outside floor-plan extent")
    clamped = not fp.contains(md_estimate)
    md = fp.clamp(md_estimate) if clamped else (float(md_estimate[0]), float(md_estimate[1]))
    ppm = fp.pixels_per_meter
    pts, origin, u, d = crop_grid(ap_location, md, ppm, cfg)
    if cfg.mode == "nearest":
        pixels = fp.sample(pts)
    elif cfg.mode == "bilinear":
        pixels = fp.sample_bilinear(pts)
    else:
        raise ValueError(f"unknown interpolation mode {cfg.mode!r}")
    ax = cfg.margin_m * ppm
    mid = cfg.height_px / 2
    return CroppedImage(
        pixels=pixels,
        ap_anchor_px=(ax, mid),
        md_anchor_px=(ax + d * ppm, mid),
        rotation_deg=-math.degrees(math.atan2(u[1], u[0])),
        clamped=clamped,
        origin_m=(float(origin[0]), float(origin[1])),
        axis_u=(float(u[0]), float(u[1])),
        pixels_per_meter=ppm,
    )


# ---------------------------------------------------------------------------
# walls


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def wall_crossings_many(walls, a, b, eps=1e-12):
    """Wall-crossing counts for many segments ``a[i] -> b[i]`` (arrays ``(n, 2)``).

    A wall counts when the closed segments intersect, so touching a wall end
    or grazing it counts as a crossing. Degenerate segments (a == b) give 0.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    walls = np.asarray(walls, dtype=np.float64).reshape(-1, 4)
    n = len(a)
    if len(walls) == 0 or n == 0:
        return np.zeros(n, dtype=np.int64)
    ax, ay = a[:, 0:1], a[:, 1:2]
    bx, by = b[:, 0:1], b[:, 1:2]
    px, py, qx, qy = (walls[None, :, i] for i in range(4))
    o1 = _orient(ax, ay, bx, by, px, py)
    o2 = _orient(ax, ay, bx, by, qx, qy)
    o3 = _orient(px, py, qx, qy, ax, ay)
    o4 = _orient(px, py, qx, qy, bx, by)
    s1, s2, s3, s4 = (np.where(np.abs(o) <= eps, 0, np.sign(o)) for o in (o1, o2, o3, o4))
    proper = (s1 * s2 < 0) & (s3 * s4 < 0)

    def on_seg(x0, y0, x1, y1, x, y):
        return ((np.minimum(x0, x1) - eps <= x) & (x <= np.maximum(x0, x1) + eps)
                & (np.minimum(y0, y1) - eps <= y) & (y <= np.maximum(y0, y1) + eps))

    touch = (((s1 == 0) & on_seg(ax, ay, bx, by, px, py))
             | ((s2 == 0) & on_seg(ax, ay, bx, by, qx, qy))
             | ((s3 == 0) & on_seg(px, py, qx, qy, ax, ay))
             | ((s4 == 0) & on_seg(px, py, qx, qy, bx, by)))
    hit = proper | touch
    degenerate = (np.abs(ax - bx) <= eps) & (np.abs(ay - by) <= eps)
    hit &= ~degenerate
    return hit.sum(axis=1).astype(np.int64)


def count_wall_crossings(fp, a, b):
    """Number of walls intersected by the segment from ``a`` to ``b``."""
    return int(wall_crossings_many(fp.walls, [a], [b])[0])


def rasterize_walls(walls, extent_m, ppm, thickness_m=0.15):
    """Binary raster (1 = free, 0 = wall) of ``walls`` with origin at the top-left corner."""
    w, h = extent_m
    cols, rows = int(round(w * ppm)), int(round(h * ppm))
    raster = np.ones((rows, cols))
    half = max(thickness_m / 2, 0.5 / ppm)
    for x1, y1, x2, y2 in np.asarray(walls, dtype=np.float64).reshape(-1, 4):
        c0 = max(int(math.floor((min(x1, x2) - half) * ppm)), 0)
        c1 = min(int(math.ceil((max(x1, x2) + half) * ppm)), cols)
        r0 = max(int(math.floor((min(y1, y2) - half) * ppm)), 0)
        r1 = min(int(math.ceil((max(y1, y2) + half) * ppm)), rows)
        if c1 <= c0 or r1 <= r0:
            continue
        cx = (np.arange(c0, c1) + 0.5) / ppm
        cy = (np.arange(r0, r1) + 0.5) / ppm
        X, Y = np.meshgrid(cx, cy)
        dx, dy = x2 - x1, y2 - y1
        L2 = dx * dx + dy * dy
        t = np.clip(((X - x1) * dx + (Y - y1) * dy) / L2, 0, 1) if L2 > 0 else np.zeros_like(X)
        dist = np.hypot(X - (x1 + t * dx), Y - (y1 + t * dy))
        block = raster[r0:r1, c0:c1]
        block[dist <= half] = 0.0
    return raster


def make_floorplan(walls, extent_m, ppm, thickness_m=0.15):
    """FloorPlan with world origin at the raster's top-left corner and y pointing down."""
    raster = rasterize_walls(walls, extent_m, ppm, thickness_m)
    return FloorPlan(raster=raster, pixels_per_meter=float(ppm), origin_px=(0.0, 0.0),
                     walls=np.asarray(walls, dtype=np.float64).reshape(-1, 4),
                     extent_m=tuple(extent_m), y_axis="down")


# ---------------------------------------------------------------------------
# file I/O


def save_floorplan(fp, raster_path, meta_path):
    img = Image.fromarray(np.round(fp.raster * 255).astype(np.uint8), mode="L")
    img.save(raster_path)
    meta = {
        "pixels_per_meter": fp.pixels_per_meter,
        "origin_px": list(fp.origin_px),
        "y_axis": fp.y_axis,
        "walls": [list(map(float, w)) for w in fp.walls],
        "extent_m": list(fp.extent_m),
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2))


def load_floorplan(raster_path, meta_path):
    """Read a grayscale PNG/PGM raster plus its JSON metadata into a validated FloorPlan."""
    try:
        with Image.open(raster_path) as img:
            raster = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises several types for corrupt files
        raise ValueError(f"cannot read raster {raster_path}: {exc}") from exc
    try:
        meta = json.loads(Path(meta_path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt floor-plan metadata {meta_path}: {exc}") from exc
    missing = {"pixels_per_meter", "origin_px", "walls"} - set(meta)
    if missing:
        raise ValueError(f"metadata {meta_path} missing keys {sorted(missing)}")
    ppm = float(meta["pixels_per_meter"])
    if not ppm > 0:
        raise ValueError(f"pixels_per_meter must be positive, got {ppm}")
    if raster.size == 0:
        raise ValueError("empty raster")
    extent = meta.get("extent_m") or [raster.shape[1] / ppm, raster.shape[0] / ppm]
    return FloorPlan(raster=raster, pixels_per_meter=ppm, origin_px=tuple(meta["origin_px"]),
                     walls=np.asarray(meta["walls"], dtype=np.float64).reshape(-1, 4),
                     extent_m=tuple(extent), y_axis=meta.get("y_axis", "down"))


def save_pgm(path, image):
    """Write a crop (or any ``(W, H)`` array in [0, 1]) as an 8-bit PGM, rows = across axis."""
    pixels = image.pixels if isinstance(image, CroppedImage) else np.asarray(image)
    Image.fromarray(np.round(pixels.T * 255).astype(np.uint8), mode="L").save(path, format="PPM")
