"""Dense regression over full images, vote accumulation and non-maxima suppression."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import imgproc
from . import net


class ImageTooSmall(ValueError):
    pass


@dataclass
class DisplacementField:
    """Per-pixel regressor output over an image.

    ``values[y, x]`` holds the displacement (translation head) or the raw
    orientation vector (rotation head) of the patch whose center pixel is
    ``(x, y)``. Pixels whose patch leaves the image are invalid and hold zeros.
    """

    values: np.ndarray  # (H, W, 2)
    valid: np.ndarray  # (H, W) bool
    head: str = "translation"

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def angles(self):
        """Orientation in radians per pixel (rotation head)."""
        return np.arctan2(self.values[..., 1], self.values[..., 0])


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float
    angle: float | None = None


def _check_image(model, img):
    img = imgproc.as_image(img)
    side = model.spec.input_side
    if img.shape[0] < side or img.shape[1] < side:
        raise ImageTooSmall(f"image smaller than receptive field ({img.shape[1]}x{img.shape[0]} < {side}x{side})")
    return img


def _assemble(model, img, grid, stride=1):
    """Place per-top-left outputs ``grid`` into a full-size field."""
    h, w = img.shape
    side = model.spec.input_side
    half = side // 2
    values = np.zeros((h, w, grid.shape[-1]))
    valid = np.zeros((h, w), dtype=bool)
    values[half : half + h - side + 1 : stride, half : half + w - side + 1 : stride] = grid[::stride, ::stride]
    valid[half : half + h - side + 1 : stride, half : half + w - side + 1 : stride] = True
    return DisplacementField(values, valid, model.head)


def dense_regress_naive(model, img, batch_size=1024):
    """Evaluate the model independently on every 28x28 patch of ``img``."""
    img = _check_image(model, img)
    side = model.spec.input_side
    win = sliding_window_view(img, (side, side))  # (H - side + 1, W - side + 1, side, side)
    gh, gw = win.shape[:2]
    out = model.predict(win.reshape(gh * gw, side, side), batch_size=batch_size)
    return _assemble(model, img, out.reshape(gh, gw, -1))


# rows per conv chunk are chosen to keep the im2col buffer near this many floats
_CHUNK_FLOATS = 4_000_000


def _conv_chunked(x, w, b):
    kh, kw, c, o = w.shape
    ho = x.shape[1] - kh + 1
    wo = x.shape[2] - kw + 1
    rows = max(1, _CHUNK_FLOATS // max(1, wo * kh * kw * c))
    if rows >= ho:
        return net.conv_forward(x, w, b)[0]
    out = np.empty((x.shape[0], ho, wo, o), dtype=np.result_type(x, w))
    for r in range(0, ho, rows):
        r1 = min(ho, r + rows)
        out[:, r:r1] = net.conv_forward(x[:, r : r1 + kh - 1], w, b)[0]
    return out


def dense_regress(model, img, stride=1):
    """Dense field via the split-and-recurse construction.

    Each pooling layer is evaluated with stride one and its output split into
    the four phase parts, to which deeper layers are applied separately. Every
    early-layer pixel is thus computed once. With ``stride=2`` only the even
    phase is kept at the first pooling layer, so the field is evaluated at
    even pixels only.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    img = _check_image(model, img)
    spec = model.spec
    x = net.normalize_input(img, model.normalization)[None, :, :, None]
    # each part: (activations, row offset, col offset, step) in top-left coordinates
    parts = [(x, 0, 0, 1)]
    first_pool = True
    it = iter(model.params)
    for layer in spec.layers:
        if layer.kind == "conv":
            w, b = next(it), next(it)
            # parts smaller than the kernel hold no complete receptive field
            kh, kw = w.shape[:2]
            parts = [
                (_conv_chunked(a, w, b), oy, ox, s) for a, oy, ox, s in parts if a.shape[1] >= kh and a.shape[2] >= kw
            ]
        elif layer.kind == "maxpool2":
            phases = [(0, 0)] if (stride == 2 and first_pool) else [(0, 0), (0, 1), (1, 0), (1, 1)]
            new = []
            for a, oy, ox, s in parts:
                if a.shape[1] < 2 or a.shape[2] < 2:
                    continue
                d = net.pool_dense(a)
                for py, px in phases:
                    sub = d[:, py::2, px::2]
                    if sub.shape[1] and sub.shape[2]:
                        new.append((sub, oy + s * py, ox + s * px, 2 * s))
            parts = new
            first_pool = False
        else:
            parts = [(net.layer_forward(layer, a), oy, ox, s) for a, oy, ox, s in parts]
    side = spec.input_side
    gh, gw = img.shape[0] - side + 1, img.shape[1] - side + 1
    grid = np.zeros((gh, gw, spec.out_dim))
    for a, oy, ox, s in parts:
        # deeper layers may leave fewer positions than the phase grid holds
        ny = len(range(oy, gh, s))
        nx = len(range(ox, gw, s))
        grid[oy::s, ox::s] = a[0, :ny, :nx]
    return _assemble(model, img, grid, stride)


# --------------------------------------------------------------------------
# Votes
# --------------------------------------------------------------------------


def _vote_targets(field):
    ys, xs = np.nonzero(field.valid)
    d = field.values[ys, xs]
    return ys, xs, xs + d[:, 0], ys + d[:, 1]


def _splat(h, w, tx, ty, weights=None):
    """Bilinear splat; returns ``(flat bin indices (4, n), weights (4, n), keep)``."""
    keep = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    tx, ty = tx[keep], ty[keep]
    x0 = np.minimum(np.floor(tx).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(ty).astype(np.int64), h - 1)
    fx, fy = tx - x0, ty - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wt = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    if weights is not None:
        wt = wt * weights[keep]
    return idx, wt, keep


def accumulate_votes(field):
    """Vote map: every valid pixel casts unit mass at its predicted feature location."""
    if field.head != "translation":
        raise ValueError("votes need a translation field")
    h, w = field.height, field.width
    _, _, tx, ty = _vote_targets(field)
    idx, wt, _ = _splat(h, w, tx, ty)
    return np.bincount(idx.ravel(), weights=wt.ravel(), minlength=h * w).reshape(h, w)


def _shifted(padded, r, dy, dx, h, w):
    return padded[r + dy : r + dy + h, r + dx : r + dx + w]


def local_peaks(votes, radius=2):
    """Boolean mask of peaks under the scan-order tie rule.

    A peak is > 0, strictly greater than every neighbor later in row-major
    order, at least as large as every earlier neighbor, and strictly greater
    than the smallest value in its neighborhood (so flat regions never peak).
    """
    if radius < 1:
        raise ValueError("radius must be at least 1")
    v = np.asarray(votes, dtype=np.float64)
    h, w = v.shape
    r = int(radius)
    pos = np.pad(v, r, mode="constant", constant_values=-np.inf)
    neg = np.pad(v, r, mode="constant", constant_values=np.inf)
    peak = v > 0
    nmin = v.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = _shifted(pos, r, dy, dx, h, w)
            if (dy, dx) > (0, 0):
                peak &= v > nb
            else:
                peak &= v >= nb
            nmin = np.minimum(nmin, _shifted(neg, r, dy, dx, h, w))
    return peak & (v > nmin)


def nms(votes, radius=2, max_detections=None, subpixel=True):
    """Detections at vote-map peaks, by descending confidence.

    Confidence is the vote mass of the peak bin. With ``subpixel`` the
    location is refined to the centroid of the 3x3 mass around the peak.
    """
    v = np.asarray(votes, dtype=np.float64)
    if max_detections is not None and max_detections <= 0:
        return []
    ys, xs = np.nonzero(local_peaks(v, radius))
    conf = v[ys, xs]
    # descending confidence, ties by scan order
    order = np.lexsort((xs, ys, -conf))
    if max_detections is not None:
        order = order[:max_detections]
    h, w = v.shape
    out = []
    for k in order:
        y, x = int(ys[k]), int(xs[k])
        px, py = float(x), float(y)
        if subpixel:
            y0, y1 = max(0, y - 1), min(h, y + 2)
            x0, x1 = max(0, x - 1), min(w, x + 2)
            m = v[y0:y1, x0:x1]
            gy, gx = np.mgrid[y0:y1, x0:x1]
            s = m.sum()
            px, py = float((m * gx).sum() / s), float((m * gy).sum() / s)
        out.append(Detection(px, py, float(conf[k])))
    return out


# --------------------------------------------------------------------------
# Orientation
# --------------------------------------------------------------------------


def circular_mean(angles, weights=None):
    """Weighted circular mean in radians, or ``None`` if the resultant vanishes."""
    a = np.asarray(angles, dtype=np.float64)
    wts = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64)
    c, s = float(np.sum(wts * np.cos(a))), float(np.sum(wts * np.sin(a)))
    if math.hypot(c, s) < 1e-12:
        return None
    return math.atan2(s, c)


def orient_keypoints(orientation_field, keypoints, radius=1):
    """Angle for each ``(x, y)`` keypoint: circular mean over valid pixels within ``radius``."""
    if orientation_field.head != "rotation":
        raise ValueError("orientation needs a rotation field")
    h, w = orientation_field.height, orientation_field.width
    ang = orientation_field.angles
    mag = np.hypot(orientation_field.values[..., 0], orientation_field.values[..., 1])
    ok = orientation_field.valid & (mag > 1e-12)
    out = []
    for x, y in keypoints:
        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
        sel = ok[y0:y1, x0:x1]
        out.append(circular_mean(ang[y0:y1, x0:x1][sel]) if sel.any() else None)
    return out


def _vote_weighted_angles(field, orientation_field, detections, radius):
    """Circular mean of orientations of the pixels voting near each detection."""
    h, w = field.height, field.width
    ys, xs, tx, ty = _vote_targets(field)
    idx, wt, keep = _splat(h, w, tx, ty)
    ys, xs = ys[keep], xs[keep]
    ov = orientation_field.values[ys, xs]
    ovalid = orientation_field.valid[ys, xs] & (np.hypot(ov[:, 0], ov[:, 1]) > 1e-12)
    ang = np.arctan2(ov[:, 1], ov[:, 0])
    by, bx = np.divmod(idx, w)
    out = []
    for det in detections:
        cx, cy = int(round(det.x)), int(round(det.y))
        near = (np.abs(bx - cx) <= radius) & (np.abs(by - cy) <= radius)
        mass = np.where(near, wt, 0.0).sum(axis=0) * ovalid
        out.append(circular_mean(ang[mass > 0], mass[mass > 0]) if np.any(mass > 0) else None)
    return out


def detect_from_field(field, radius=2, max_detections=None, subpixel=True, orientation_field=None):
    votes = accumulate_votes(field)
    dets = nms(votes, radius, max_detections, subpixel)
    if orientation_field is not None and dets:
        angles = _vote_weighted_angles(field, orientation_field, dets, radius)
        dets = [Detection(d.x, d.y, d.confidence, a) for d, a in zip(dets, angles)]
    return dets


def detect(model, img, stride=1, max_detections=None, radius=2, subpixel=True, orientation_model=None):
    """Dense regression, vote accumulation and non-maxima suppression.

    ``model`` must have a translation head. If ``orientation_model`` (rotation
    head) is given, each detection also gets the vote-weighted circular mean
    orientation of the pixels that voted for it.
    """
    if model.head != "translation":
        raise ValueError("detection needs a translation-head model; use orient_keypoints for orientation")
    if max_detections is not None and max_detections <= 0:
        return []
    field = dense_regress(model, img, stride)
    ofield = None
    if orientation_model is not None:
        ofield = dense_regress(orientation_model, img, stride)
    return detect_from_field(field, radius, max_detections, subpixel, ofield)


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------


def format_detections(dets):
    lines = []
    for d in dets:
        line = f"{d.x:.3f},{d.y:.3f},{d.confidence:.6f}"
        if d.angle is not None:
            line += f",{d.angle:.6f}"
        lines.append(line + "\n")
    return "".join(lines)


def write_detections(path, dets):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as f:
        f.write(format_detections(dets))
    os.replace(tmp, path)


def read_detections(path):
    dets = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected x,y,confidence[,angle]")
            vals = [float(p) for p in parts]
            dets.append(Detection(vals[0], vals[1], vals[2], vals[3] if len(parts) == 4 else None))
    return dets


def write_vote_map(path, votes):
    """Dump a vote map as an 8-bit PGM scaled so the largest bin is 255."""
    v = np.asarray(votes, dtype=np.float64)
    top = v.max() if v.size else 0.0
    imgproc.write_pgm(path, v * (255.0 / top) if top > 0 else np.zeros_like(v))
