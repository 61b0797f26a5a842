"""Repeatability, matching score, orientation error and a Harris baseline."""

from __future__ import annotations

import math
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from . import geometry as geo
from . import imgproc
from .detect import Detection, nms


class EmptyDetections(UserWarning):
    pass


DEFAULT_DIST_TOL = 5.0
DESCRIPTOR_REGION = 41
DESCRIPTOR_GRID = 8


@dataclass
class ImagePair:
    img_a: np.ndarray
    img_b: np.ndarray
    h_ab: geo.Transform2D  # maps a-coordinates to b-coordinates
    scene: str = ""

    def __post_init__(self):
        if abs(self.h_ab.det) < 1e-12:
            raise geo.NonInvertibleTransform("non-invertible transform")


@dataclass
class MetricCurve:
    points: list = field(default_factory=list)  # (n, score), n strictly increasing

    @property
    def ns(self):
        return [n for n, _ in self.points]

    @property
    def scores(self):
        return [s for _, s in self.points]


def _xy(dets):
    return np.array([[d.x, d.y] for d in dets], dtype=np.float64).reshape(-1, 2)


def _inside(pts, shape):
    h, w = shape
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def _top(dets, n):
    return list(dets)[: max(0, int(n))]


def correspondence_candidates(dets_a, dets_b, h_ab, dist_tol, shape_b=None):
    """Distances ``(len(a), len(b))`` between mapped a-points and b-points.

    Pairs farther than ``dist_tol`` or whose mapped a-point leaves image b are
    set to ``inf``.
    """
    pa = h_ab.apply(_xy(dets_a)) if dets_a else np.zeros((0, 2))
    pb = _xy(dets_b)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    d[d > dist_tol] = np.inf
    if shape_b is not None and len(pa):
        d[~_inside(pa, shape_b)] = np.inf
    return d


def max_matching(dist):
    """Largest one-to-one set of finite-distance pairs, minimal total distance among those."""
    if dist.size == 0 or not np.isfinite(dist).any():
        return []
    finite = np.isfinite(dist)
    big = float(dist[finite].sum()) + 1.0
    cost = np.where(finite, dist, big * (1 + dist.shape[0] + dist.shape[1]))
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]


def _empty_check(a, b):
    if not a or not b:
        warnings.warn("empty detection list; score is 0", EmptyDetections, stacklevel=3)
        return True
    return False


def repeatability(dets_a, dets_b, h_ab, dist_tol=DEFAULT_DIST_TOL, n=None, shape_b=None):
    """Fraction of the top-``n`` detections of ``a`` re-detected in ``b``.

    A detection ``p`` is repeated if ``h_ab(p)`` lies inside image ``b`` (when
    ``shape_b`` is given) and within ``dist_tol`` of a distinct top-``n``
    detection of ``b``; correspondences are a maximum one-to-one assignment.
    The count is divided by ``min(kept_a, kept_b)``.
    """
    if n is not None and n < 1:
        raise ValueError("n must be at least 1")
    a = _top(dets_a, n if n is not None else len(dets_a))
    b = _top(dets_b, n if n is not None else len(dets_b))
    if _empty_check(a, b):
        return 0.0
    pairs = max_matching(correspondence_candidates(a, b, h_ab, dist_tol, shape_b))
    return len(pairs) / min(len(a), len(b))


def _area_weights(n_in, n_out):
    """Row-stochastic matrix averaging ``n_in`` samples into ``n_out`` equal bins."""
    edges = np.linspace(0, n_in, n_out + 1)
    lo = np.arange(n_in)
    w = np.clip(np.minimum(edges[1:, None], lo + 1) - np.maximum(edges[:-1, None], lo), 0, None)
    return w / w.sum(axis=1, keepdims=True)


_AREA = _area_weights(DESCRIPTOR_REGION, DESCRIPTOR_GRID)


def patch_descriptor(img, det, side=DESCRIPTOR_REGION):
    """64-d zero-mean unit-norm descriptor of the ``side`` x ``side`` region around ``det``.

    Returns ``None`` if the region leaves the image and a zero vector for a
    flat (degenerate) region.
    """
    img = np.asarray(img, dtype=np.float64)
    r = (side - 1) / 2
    h, w = img.shape
    if det.x - r < 0 or det.y - r < 0 or det.x + r > w - 1 or det.y + r > h - 1:
        return None
    offs = np.arange(side) - r
    xs = det.x + offs[None, :]
    ys = det.y + offs[:, None]
    patch = imgproc.bilinear_sample(img, np.broadcast_to(xs, (side, side)), np.broadcast_to(ys, (side, side)))
    area = _AREA if side == DESCRIPTOR_REGION else _area_weights(side, DESCRIPTOR_GRID)
    v = (area @ patch @ area.T).ravel()
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-9 * max(1.0, np.abs(patch).max()):
        return np.zeros_like(v)
    return v / norm


def is_degenerate(desc):
    return desc is not None and not np.any(desc)


def matching_score(dets_a, dets_b, img_a, img_b, h_ab, dist_tol=DEFAULT_DIST_TOL, n=None):
    """Mutual nearest-neighbor descriptor matches that are geometrically correct.

    Divided by ``min(kept_a, kept_b)`` with the same top-``n`` selection as
    :func:`repeatability`. Detections whose descriptor region leaves the image
    or is flat cannot match.
    """
    if n is not None and n < 1:
        raise ValueError("n must be at least 1")
    a = _top(dets_a, n if n is not None else len(dets_a))
    b = _top(dets_b, n if n is not None else len(dets_b))
    if _empty_check(a, b):
        return 0.0
    da = [patch_descriptor(img_a, d) for d in a]
    db = [patch_descriptor(img_b, d) for d in b]
    ia = [i for i, v in enumerate(da) if v is not None and not is_degenerate(v)]
    ib = [j for j, v in enumerate(db) if v is not None and not is_degenerate(v)]
    if not ia or not ib:
        return 0.0
    A = np.stack([da[i] for i in ia])
    B = np.stack([db[j] for j in ib])
    dd = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    nn_ab = np.argmin(dd, axis=1)
    nn_ba = np.argmin(dd, axis=0)
    geo_ok = np.isfinite(correspondence_candidates(a, b, h_ab, dist_tol, np.shape(img_b)))
    count = sum(1 for k, m in enumerate(nn_ab) if nn_ba[m] == k and geo_ok[ia[k], ib[m]])
    return count / min(len(a), len(b))


def wrap_angle_deg(a):
    """Absolute angle difference folded into [0, 180] degrees."""
    a = np.mod(np.asarray(a, dtype=np.float64), 360.0)
    return np.minimum(a, 360.0 - a)


def estimated_relative_rotation(raw1, raw2, convention=geo.RotationConvention.RELATIVE):
    """Relative rotation (radians) implied by two orientation outputs.

    ``theta1 - theta2`` under the relative convention, ``theta2 - theta1`` under
    the composition convention. Rows with a zero-length output give ``nan``.
    """
    raw1 = np.atleast_2d(np.asarray(raw1, dtype=np.float64))
    raw2 = np.atleast_2d(np.asarray(raw2, dtype=np.float64))
    t1 = np.arctan2(raw1[:, 1], raw1[:, 0])
    t2 = np.arctan2(raw2[:, 1], raw2[:, 0])
    est = t1 - t2 if geo.RotationConvention(convention) is geo.RotationConvention.RELATIVE else t2 - t1
    bad = (np.hypot(*raw1.T) <= 1e-12) | (np.hypot(*raw2.T) <= 1e-12)
    return np.where(bad, np.nan, est)


def angular_error_from_outputs(raw1, raw2, true_rotation, convention=geo.RotationConvention.RELATIVE):
    """``(mean_deg, median_deg, skipped)`` of the wrapped rotation error."""
    est = estimated_relative_rotation(raw1, raw2, convention)
    ok = np.isfinite(est)
    err = wrap_angle_deg(np.degrees(est[ok] - np.asarray(true_rotation, dtype=np.float64)[ok]))
    skipped = int((~ok).sum())
    if err.size == 0:
        return float("nan"), float("nan"), skipped
    return float(err.mean()), float(np.median(err)), skipped


def angular_error(model, x1, x2, true_rotation, convention=None):
    """Angular registration error of a rotation-head model over patch pairs."""
    if model.head != "rotation":
        raise ValueError("angular error needs a rotation-head model")
    if convention is None:
        convention = model.metadata.get("convention", "relative")
    return angular_error_from_outputs(model.predict(x1), model.predict(x2), true_rotation, convention)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------


def harris_response(img, sigma_d=1.0, sigma_i=2.0, k=0.04):
    if sigma_d <= 0 or sigma_i <= 0:
        raise ValueError("sigma_d and sigma_i must be positive")
    if not 0 < k < 0.25:
        raise ValueError("k must be in (0, 0.25)")
    img = np.asarray(img, dtype=np.float64)
    ix = ndimage.gaussian_filter(img, sigma_d, order=(0, 1), mode="nearest")
    iy = ndimage.gaussian_filter(img, sigma_d, order=(1, 0), mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma_i, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma_i, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma_i, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_detect(img, sigma_d=1.0, sigma_i=2.0, k=0.04, max_detections=None, border=None):
    """Harris corners ranked by cornerness, NMS radius 2.

    Responses within ``border`` pixels of the image edge (default
    ``ceil(3 * sigma_i)``) are ignored.
    """
    r = harris_response(img, sigma_d, sigma_i, k)
    b = math.ceil(3 * sigma_i) if border is None else int(border)
    if b > 0:
        r[:b] = 0
        r[-b:] = 0
        r[:, :b] = 0
        r[:, -b:] = 0
    # responses of a flat image are round-off noise
    r[r <= 1e-9 * max(1.0, float(np.abs(r).max()))] = 0
    return nms(r, radius=2, max_detections=max_detections, subpixel=False)


def random_detections(shape, n, seed=0, border=0):
    """``n`` uniformly placed detections with decreasing confidence."""
    h, w = shape
    rng = np.random.default_rng(seed)
    xs = rng.uniform(border, w - 1 - border, size=n)
    ys = rng.uniform(border, h - 1 - border, size=n)
    return [Detection(float(x), float(y), float(n - i)) for i, (x, y) in enumerate(zip(xs, ys))]


# --------------------------------------------------------------------------
# Curves and files
# --------------------------------------------------------------------------

METRICS = ("repeatability", "matching_score")


def build_curves(pairs, dets_a, dets_b, n_grid, dist_tol=DEFAULT_DIST_TOL, metrics=METRICS):
    """Per-scene mean metric curves; returns ``{(scene, metric): MetricCurve}``.

    ``dets_a[i]`` and ``dets_b[i]`` are the detections on ``pairs[i]``.
    """
    n_grid = [int(n) for n in n_grid]
    if not n_grid or any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise ValueError("n_grid must be a nonempty strictly increasing list of positive integers")
    if not (len(pairs) == len(dets_a) == len(dets_b)):
        raise ValueError("one detection list per image of each pair is required")
    sums = defaultdict(lambda: np.zeros(len(n_grid)))
    counts = defaultdict(int)
    for pair, da, db in zip(pairs, dets_a, dets_b):
        counts[pair.scene] += 1
        for metric in metrics:
            for i, n in enumerate(n_grid):
                if metric == "repeatability":
                    s = repeatability(da, db, pair.h_ab, dist_tol, n, np.shape(pair.img_b))
                elif metric == "matching_score":
                    s = matching_score(da, db, pair.img_a, pair.img_b, pair.h_ab, dist_tol, n)
                else:
                    raise ValueError(f"unknown metric {metric!r}")
                sums[(pair.scene, metric)][i] += s
    return {
        key: MetricCurve([(n, float(v / counts[key[0]])) for n, v in zip(n_grid, total)])
        for key, total in sums.items()
    }


def read_pair_list(path):
    """Parse ``imgA imgB m11 m12 m21 m22 t1 t2`` lines; paths are relative to the list file."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            a, b = (os.path.join(base, p) for p in parts[:2])
            m11, m12, m21, m22, t1, t2 = (float(v) for v in parts[2:])
            out.append((a, b, geo.Transform2D([[m11, m12], [m21, m22]], [t1, t2])))
    return out


def write_pair_list(path, entries):
    """Write ``(path_a, path_b, h_ab)`` entries; paths are stored as given."""
    with open(path, "w") as f:
        for a, b, h in entries:
            m, t = h.m, h.t
            f.write(f"{a} {b} {m[0, 0]:.9g} {m[0, 1]:.9g} {m[1, 0]:.9g} {m[1, 1]:.9g} {t[0]:.9g} {t[1]:.9g}\n")


def load_pairs(path):
    """Image pairs from a pair list; the scene is the stem of the first image."""
    pairs = []
    for a, b, h in read_pair_list(path):
        scene = os.path.splitext(os.path.basename(a))[0]
        pairs.append(ImagePair(imgproc.read_pgm(a), imgproc.read_pgm(b), h, scene))
    return pairs


def write_metrics_csv(path, curves):
    rows = ["scene,metric,n,score\n"]
    for (scene, metric), curve in sorted(curves.items()):
        rows.extend(f"{scene},{metric},{n},{s:.6f}\n" for n, s in curve.points)
    with open(path, "w", newline="\n") as f:
        f.writelines(rows)
