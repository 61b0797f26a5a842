"""Synthetic images of polygons and discs on a textured background."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry as geo
from . import imgproc

SUPERSAMPLE = 4


@dataclass(frozen=True)
class SynthConfig:
    """Shapes sit on a grid of square cells, one shape per chosen cell.

    The defaults give object-centric training images: one shape near the
    center of a 64-pixel image. ``scene_config`` tiles the same cell
    statistics into multi-shape evaluation scenes.
    """

    count: int = 500
    side: int = 64
    shapes: int = 1
    seed: int = 0
    background_contrast: float = 24.0
    texture_scale: float = 2.0  # smoothing of the background noise, pixels
    min_shape_contrast: float = 100.0
    min_radius: float = 0.1  # shape radius as a fraction of the cell
    max_radius: float = 0.2
    max_offset: float = 0.04  # shape center offset from the cell center, fraction of the cell
    disc_fraction: float = 0.5  # share of discs among shapes; the rest are polygons

    def __post_init__(self):
        if self.count < 0 or self.shapes < 1:
            raise ValueError("count must be non-negative and shapes positive")
        if self.side < 57:
            raise ValueError("side must be at least 57")
        if not 0 < self.min_radius <= self.max_radius <= 0.5:
            raise ValueError("need 0 < min_radius <= max_radius <= 0.5")
        if not 0 <= self.disc_fraction <= 1:
            raise ValueError("disc_fraction must be in [0, 1]")


@dataclass
class Landmark:
    kind: str  # "corner" or "blob"
    x: float
    y: float
    size: float  # blob radius, or 0 for corners


def _texture(rng, side, contrast, scale):
    base = rng.normal(size=(side, side))
    smooth = ndimage.gaussian_filter(base, scale, mode="wrap")
    smooth /= smooth.std() + 1e-12
    return 128.0 + contrast * smooth


def _convex_polygon(rng, cx, cy, r):
    n = int(rng.integers(3, 6))
    # well-spread angles keep corners sharp
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    while np.min(np.diff(np.r_[angles, angles[0] + 2 * math.pi])) < 0.6:
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = r * rng.uniform(0.7, 1.0, size=n)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def _polygon_coverage(verts, side):
    """Fractional pixel coverage of a convex polygon (counter-clockwise in x-right, y-down)."""
    s = SUPERSAMPLE
    x0, y0 = np.floor(verts.min(axis=0)).astype(int)
    x1, y1 = np.ceil(verts.max(axis=0)).astype(int) + 1
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, side), min(y1, side)
    sub = (np.arange((x1 - x0) * s) + 0.5) / s - 0.5 + x0
    suby = (np.arange((y1 - y0) * s) + 0.5) / s - 0.5 + y0
    px, py = np.meshgrid(sub, suby)
    inside = np.ones(px.shape, dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
    cov = np.zeros((side, side))
    cov[y0:y1, x0:x1] = inside.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    return cov


def _disc_coverage(cx, cy, r, side):
    s = SUPERSAMPLE
    x0, y0 = max(int(cx - r) - 1, 0), max(int(cy - r) - 1, 0)
    x1, y1 = min(int(cx + r) + 2, side), min(int(cy + r) + 2, side)
    sub = (np.arange((x1 - x0) * s) + 0.5) / s - 0.5 + x0
    suby = (np.arange((y1 - y0) * s) + 0.5) / s - 0.5 + y0
    px, py = np.meshgrid(sub, suby)
    inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    cov = np.zeros((side, side))
    cov[y0:y1, x0:x1] = inside.reshape(y1 - y0, s, x1 - x0, s).mean(axis=(1, 3))
    return cov


def _shape_level(rng, background, contrast):
    while True:
        level = rng.uniform(0, 255)
        if abs(level - background) >= contrast:
            return level


def scene_config(cfg=None, grid=6, **overrides):
    """Evaluation scenes: ``grid x grid`` cells, each drawn like one training image."""
    cfg = cfg or SynthConfig()
    return dataclasses.replace(cfg, side=cfg.side * grid, shapes=cfg.shapes * grid * grid, **overrides)


def _cells(cfg):
    """Jittered-grid cell boxes ``(x0, y0, size)``; one shape per cell keeps features apart."""
    k = math.ceil(math.sqrt(cfg.shapes))
    size = cfg.side / k
    return [(i * size, j * size, size) for j in range(k) for i in range(k)]


def render_image(rng, cfg):
    """One synthetic image in [0, 255] and its landmarks."""
    img = _texture(rng, cfg.side, cfg.background_contrast, cfg.texture_scale)
    marks = []
    cells = _cells(cfg)
    chosen = rng.choice(len(cells), size=cfg.shapes, replace=False)
    for c in sorted(chosen):
        x0, y0, size = cells[c]
        level = _shape_level(rng, 128.0, cfg.min_shape_contrast)
        r = rng.uniform(cfg.min_radius, cfg.max_radius) * size
        cx, cy = np.array([x0, y0]) + size / 2 + rng.uniform(-1, 1, size=2) * cfg.max_offset * size
        if rng.random() < 1.0 - cfg.disc_fraction:
            verts = _convex_polygon(rng, cx, cy, r)
            cov = _polygon_coverage(verts, cfg.side)
            marks.extend(Landmark("corner", float(x), float(y), 0.0) for x, y in verts)
        else:
            cov = _disc_coverage(cx, cy, r, cfg.side)
            marks.append(Landmark("blob", float(cx), float(cy), float(r)))
        img = img * (1 - cov) + level * cov
    return np.clip(img, 0, 255), marks


def write_landmarks(path, marks):
    with open(path, "w", newline="\n") as f:
        f.write("kind,x,y,size\n")
        f.writelines(f"{m.kind},{m.x:.4f},{m.y:.4f},{m.size:.4f}\n" for m in marks)


def read_landmarks(path):
    out = []
    with open(path) as f:
        next(f)
        for line in f:
            kind, x, y, size = line.strip().split(",")
            out.append(Landmark(kind, float(x), float(y), float(size)))
    return out


def synth_corpus(cfg, out_dir):
    """Write ``cfg.count`` images ``synth_NNNN.pgm`` plus landmark CSVs; returns the count."""
    if cfg.count == 0:
        return 0
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    for i in range(cfg.count):
        img, marks = render_image(rng, cfg)
        stem = os.path.join(out_dir, f"synth_{i:04d}")
        imgproc.write_pgm(stem + ".pgm", img)
        write_landmarks(stem + ".csv", marks)
    return cfg.count


# --------------------------------------------------------------------------
# Affine image pairs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairConfig:
    max_angle: float = math.radians(20)
    log_scale: float = 0.15
    max_shear: float = 0.1
    max_translation: float = 8.0


def pixel_transform(g, center):
    """Pixel-coordinate map of warping by ``g`` about ``center``: ``T(c) g T(-c)``."""
    c = geo.Transform2D.translation(*center)
    return geo.compose(c, geo.compose(g, geo.inverse(c)))


def random_affine(rng, cfg=PairConfig()):
    """Random orientation-preserving affinity near the identity."""
    a = rng.uniform(-cfg.max_angle, cfg.max_angle)
    s1, s2 = np.exp(rng.uniform(-cfg.log_scale, cfg.log_scale, size=2))
    sh = rng.uniform(-cfg.max_shear, cfg.max_shear)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    m = rot @ np.array([[s1, sh], [0.0, s2]])
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, size=2)
    return geo.Transform2D(m, t)


def make_pair(img, rng, cfg=PairConfig()):
    """``(img_b, h_ab)`` with ``img_b`` the warp of ``img`` and ``h_ab`` in pixel coordinates."""
    g = random_affine(rng, cfg)
    img_b = imgproc.warp(img, g)
    return img_b, pixel_transform(g, imgproc.image_center(img.shape))
