"""Grayscale image helpers: warping, LoG filtering, crops and PGM I/O.

Images are 2D float64 arrays indexed ``img[y, x]`` with intensities in
``[0, 255]``. Points are ``(x, y)`` with pixel centers at integer coordinates.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy import ndimage

from .geometry import inverse

LOG_SIGMA = 2.5
LOG_THRESHOLD = 1.5


class CropOutsideImage(ValueError):
    pass


def as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2D grayscale image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image intensities must be finite")
    return img


def image_center(shape):
    h, w = shape
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def bilinear_sample(img, xs, ys):
    """Sample ``img`` at real coordinates with replicate-edge boundary."""
    h, w = img.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp(img, g, out_shape=None, center=None, out_center=None):
    """Warp ``img`` by ``g``: ``out(u) = img(g^-1(u))``.

    Coordinates are taken relative to ``center`` in the input and
    ``out_center`` in the output, both defaulting to the image centers, so
    rotations and scalings act about the middle of the image. Sampling is
    bilinear with replicate-edge boundary.
    """
    img = as_image(img)
    out_shape = img.shape if out_shape is None else tuple(out_shape)
    if out_shape[0] < 1 or out_shape[1] < 1:
        raise ValueError("output dimensions must be >= 1")
    c_in = image_center(img.shape) if center is None else np.asarray(center, dtype=np.float64)
    c_out = image_center(out_shape) if out_center is None else np.asarray(out_center, dtype=np.float64)
    gi = inverse(g)
    ys, xs = np.mgrid[0 : out_shape[0], 0 : out_shape[1]].astype(np.float64)
    u = xs - c_out[0]
    v = ys - c_out[1]
    sx = gi.m[0, 0] * u + gi.m[0, 1] * v + gi.t[0] + c_in[0]
    sy = gi.m[1, 0] * u + gi.m[1, 1] * v + gi.t[1] + c_in[1]
    return bilinear_sample(img, sx, sy)


def log_kernel(sigma, truncate=4.0):
    """Laplacian-of-Gaussian kernel truncated at ``truncate * sigma``.

    The Gaussian is normalized to unit sum on the support and the resulting
    kernel is shifted to exactly zero mean.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = int(math.ceil(truncate * sigma))
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    rr = x * x + y * y
    gauss = np.exp(-rr / (2 * sigma * sigma))
    gauss /= gauss.sum()
    k = gauss * (rr - 2 * sigma * sigma) / sigma**4
    return k - k.mean()


def log_response(img, sigma=LOG_SIGMA):
    img = as_image(img)
    return ndimage.convolve(img, log_kernel(sigma), mode="nearest")


def crop_is_informative(crop, sigma=LOG_SIGMA, threshold=LOG_THRESHOLD):
    """Reject near-uniform crops: mean absolute LoG response must exceed ``threshold``."""
    return bool(np.mean(np.abs(log_response(crop, sigma))) > threshold)


def crop_origin(center, size):
    """Top-left ``(x, y)`` of a ``size`` square whose center pixel is ``center``."""
    cx, cy = (int(round(c)) for c in center)
    return cx - size // 2, cy - size // 2


def extract_crop(img, center, size):
    """Copy the ``size x size`` window whose center pixel is ``center = (x, y)``.

    For even sizes the center pixel is the one at offset ``size // 2``.
    """
    img = np.asarray(img)
    x0, y0 = crop_origin(center, size)
    h, w = img.shape
    if size < 1 or x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise CropOutsideImage(f"crop outside image: size {size} at {tuple(center)} in {w}x{h}")
    return img[y0 : y0 + size, x0 : x0 + size].copy()


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------


def _pgm_tokens(data):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary (P5) PGM, 8 or 16 bit, as float64 intensities in [0, 255]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad PGM header")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    if len(data) < offset + n:
        raise ValueError(f"{path}: truncated PGM data")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return arr.astype(np.float64) * (255.0 / maxval)


def write_pgm(path, img, bits=8):
    img = as_image(img)
    if bits == 8:
        arr = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        maxval = 255
    elif bits == 16:
        arr = np.clip(np.rint(img * (65535.0 / 255.0)), 0, 65535).astype(">u2")
        maxval = 65535
    else:
        raise ValueError("bits must be 8 or 16")
    h, w = arr.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(arr.tobytes())
    os.replace(tmp, path)
