"""Small convolutional regressors with hand-written forward/backward passes.

Tensors are numpy arrays laid out ``(batch, height, width, channels)``.
Convolutions are valid (no padding), stride 1; pooling is 2x2 max with
stride 2. Conv weights have shape ``(kh, kw, in_channels, out_channels)``.

Parameters are a flat list ``[w0, b0, w1, b1, ...]``, one pair per conv
layer in network order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Transform2D


class ShapeError(ValueError):
    pass


class InvalidCache(ValueError):
    pass


class DegenerateOrientation(ValueError):
    pass


HEADS = ("translation", "rotation")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "relu", "maxpool2" or "lrn"
    kernel_h: int = 0
    kernel_w: int = 0
    out_channels: int = 0
    stride: int = 1
    # cross-channel normalization (kind == "lrn")
    depth: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    kappa: float = 2.0

    def __post_init__(self):
        if self.kind not in ("conv", "relu", "maxpool2", "lrn"):
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if min(self.kernel_h, self.kernel_w, self.out_channels) < 1:
                raise ShapeError("conv kernel dims and out_channels must be >= 1")
            if self.stride != 1:
                raise ShapeError("only stride-1 convolutions are supported")


def conv(k, out_channels, kw=None):
    return LayerSpec("conv", k, k if kw is None else kw, out_channels)


def relu():
    return LayerSpec("relu")


def pool():
    return LayerSpec("maxpool2")


def lrn(depth=5, alpha=1e-4, beta=0.75, kappa=2.0):
    return LayerSpec("lrn", depth=depth, alpha=alpha, beta=beta, kappa=kappa)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_side: int = 28
    out_dim: int = 2
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        h, c = self.output_shape(self.input_side, self.input_side)[1:]
        if h != 1 or c != self.out_dim:
            raise ShapeError(
                f"architecture/shape error: {self.input_side}x{self.input_side} input gives "
                f"{h}x{h}x{c}, expected 1x1x{self.out_dim}"
            )

    def output_shape(self, height, width):
        """Spatial output ``(h, w, channels)`` for an input of the given size."""
        h, w, c = height, width, self.in_channels
        for layer in self.layers:
            if layer.kind == "conv":
                h, w, c = h - layer.kernel_h + 1, w - layer.kernel_w + 1, layer.out_channels
            elif layer.kind == "maxpool2":
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError(f"architecture/shape error: input {height}x{width} too small")
        return h, w, c

    @property
    def receptive_field(self):
        return self.input_side

    def param_shapes(self):
        shapes = []
        c = self.in_channels
        for layer in self.layers:
            if layer.kind == "conv":
                shapes.append((layer.kernel_h, layer.kernel_w, c, layer.out_channels))
                shapes.append((layer.out_channels,))
                c = layer.out_channels
        return shapes

    def to_dict(self):
        return {
            "layers": [asdict(l) for l in self.layers],
            "input_side": self.input_side,
            "out_dim": self.out_dim,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            input_side=d["input_side"],
            out_dim=d["out_dim"],
            in_channels=d.get("in_channels", 1),
        )


def _stack(convs, pools_after, lrn_after=(), out_dim=2):
    layers = []
    for i, (k, n) in enumerate(convs):
        layers.append(conv(k, n))
        if i < len(convs) - 1:
            layers.append(relu())
        if i in pools_after:
            layers.append(pool())
        if i in lrn_after:
            layers.append(lrn())
    return NetworkSpec(tuple(layers), 28, out_dim)


def detnet_s(out_dim=2):
    return _stack([(5, 40), (5, 100), (4, 300), (1, 500), (1, 500), (1, out_dim)], {0, 1}, out_dim=out_dim)


def detnet_l(out_dim=2):
    return _stack(
        [(5, 60), (5, 150), (4, 450), (1, 600), (1, 600), (1, 600), (1, out_dim)], {0, 1}, {1}, out_dim=out_dim
    )


def detnet_micro(out_dim=2):
    """CPU-sized net with the DetNet-S layout and far fewer filters."""
    return _stack([(5, 10), (5, 20), (4, 50), (1, 80), (1, out_dim)], {0, 1}, out_dim=out_dim)


PRESETS = {"detnet-s": detnet_s, "detnet-l": detnet_l, "detnet-micro": detnet_micro}


def init_params(spec, seed=0, dtype=np.float64):
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            params.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype))
        else:
            params.append(np.zeros(shape, dtype=dtype))
    return params


# --------------------------------------------------------------------------
# Layer primitives
# --------------------------------------------------------------------------


def _im2col(x, kh, kw):
    n, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    if kh == 1 and kw == 1:
        return x.reshape(n * h * w, c), (n, ho, wo)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    return cols, (n, ho, wo)


def conv_forward(x, w, b):
    kh, kw, c, o = w.shape
    if x.shape[3] != c:
        raise ShapeError(f"architecture/shape error: conv expects {c} channels, got {x.shape[3]}")
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError("architecture/shape error: input smaller than kernel")
    cols, (n, ho, wo) = _im2col(x, kh, kw)
    out = cols @ w.reshape(kh * kw * c, o) + b
    return out.reshape(n, ho, wo, o), cols


def conv_backward(g, x_shape, cols, w):
    kh, kw, c, o = w.shape
    gf = g.reshape(-1, o)
    dw = (cols.T @ gf).reshape(w.shape)
    db = gf.sum(axis=0)
    dcols = gf @ w.reshape(kh * kw * c, o).T
    n, h, wd, _ = x_shape
    ho, wo = h - kh + 1, wd - kw + 1
    if kh == 1 and kw == 1:
        return dcols.reshape(x_shape), dw, db
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(x_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(g, x):
    return g * (x > 0)


def pool_forward(x):
    """2x2 max pooling, stride 2; returns the output and the argmax per window.

    Window elements are scanned row-major, the first maximum wins.
    """
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError("architecture/shape error: input too small to pool")
    xr = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
    xr = xr.reshape(n, ho, wo, c, 4)
    arg = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_backward(g, x_shape, arg):
    n, h, w, c = x_shape
    ho, wo = g.shape[1:3]
    onehot = (arg[..., None] == np.arange(4)) * g[..., None]  # n, ho, wo, c, 4
    blocks = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    dx = np.zeros(x_shape, dtype=g.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = blocks
    return dx


def pool_dense(x):
    """2x2 max pooling with stride 1 (every window position)."""
    return np.maximum(
        np.maximum(x[:, :-1, :-1], x[:, :-1, 1:]),
        np.maximum(x[:, 1:, :-1], x[:, 1:, 1:]),
    )


def _channel_window_sum(a, depth):
    half = depth // 2
    c = a.shape[-1]
    cs = np.cumsum(np.concatenate([np.zeros(a.shape[:-1] + (1,), a.dtype), a], axis=-1), axis=-1)
    hi = np.minimum(np.arange(c) + depth - half, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return cs[..., hi] - cs[..., lo]


def lrn_forward(x, layer):
    """Cross-channel normalization ``y = x / (kappa + alpha * sum x^2)^beta``."""
    den = layer.kappa + layer.alpha * _channel_window_sum(x * x, layer.depth)
    return x * den ** (-layer.beta), den


def lrn_backward(g, x, den, layer):
    t = g * x * den ** (-layer.beta - 1)
    return g * den ** (-layer.beta) - 2 * layer.alpha * layer.beta * x * _channel_window_sum(t, layer.depth)


def layer_forward(layer, x, params_iter=None):
    """Inference-only forward for one layer (used by dense evaluation)."""
    if layer.kind == "conv":
        w, b = next(params_iter), next(params_iter)
        return conv_forward(x, w, b)[0]
    if layer.kind == "relu":
        return relu_forward(x)
    if layer.kind == "maxpool2":
        return pool_forward(x)[0]
    return lrn_forward(x, layer)[0]


# --------------------------------------------------------------------------
# Network forward / backward
# --------------------------------------------------------------------------


@dataclass
class Cache:
    spec: NetworkSpec
    input_shape: tuple
    records: list = field(default_factory=list)
    output_shape: tuple = ()


def _as_batch(x, spec):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[3] != spec.in_channels:
        raise ShapeError(f"architecture/shape error: expected (N, H, W, {spec.in_channels}) input, got {x.shape}")
    return x


def forward(spec, params, x, keep_cache=True):
    """Run the network on a batch ``x`` of shape ``(N, H, W)`` or ``(N, H, W, C)``.

    Returns ``(output, cache)``; output has shape ``(N, h, w, out_dim)`` where
    ``h = w = 1`` for inputs of side ``spec.input_side``.
    """
    x = _as_batch(x, spec)
    if len(params) != len(spec.param_shapes()):
        raise ShapeError("architecture/shape error: parameter count does not match network")
    spec.output_shape(x.shape[1], x.shape[2])
    cache = Cache(spec, x.shape) if keep_cache else None
    it = iter(params)
    for layer in spec.layers:
        if layer.kind == "conv":
            w, b = next(it), next(it)
            y, cols = conv_forward(x, w, b)
            rec = (x.shape, cols)
        elif layer.kind == "relu":
            y = relu_forward(x)
            rec = x
        elif layer.kind == "maxpool2":
            y, arg = pool_forward(x)
            rec = (x.shape, arg)
        else:
            y, den = lrn_forward(x, layer)
            rec = (x, den)
        if keep_cache:
            cache.records.append(rec)
        x = y
    if keep_cache:
        cache.output_shape = x.shape
    return x, cache


def backward(spec, params, cache, grad_output, need_input_grad=True):
    """Backpropagate ``grad_output`` through the network.

    Returns ``(grad_params, grad_input)`` with ``grad_params`` laid out like
    ``params``. With ``need_input_grad=False`` the input gradient is not
    computed and ``None`` is returned in its place.
    """
    if cache is None or cache.spec != spec or len(cache.records) != len(spec.layers):
        raise InvalidCache("invalid cache")
    g = np.asarray(grad_output)
    if g.shape != cache.output_shape:
        raise InvalidCache(f"invalid cache: gradient shape {g.shape} != output shape {cache.output_shape}")
    grads = [None] * len(params)
    pi = len(params)
    for depth, (layer, rec) in enumerate(zip(reversed(spec.layers), reversed(cache.records))):
        if layer.kind == "conv":
            pi -= 2
            x_shape, cols = rec
            if pi == 0 and not need_input_grad and depth == len(spec.layers) - 1:
                gf = g.reshape(-1, params[0].shape[-1])
                grads[0] = (cols.T @ gf).reshape(params[0].shape)
                grads[1] = gf.sum(axis=0)
                return grads, None
            g, grads[pi], grads[pi + 1] = conv_backward(g, x_shape, cols, params[pi])
        elif layer.kind == "relu":
            g = relu_backward(g, rec)
        elif layer.kind == "maxpool2":
            g = pool_backward(g, *rec)
        else:
            g = lrn_backward(g, rec[0], rec[1], layer)
    return grads, g


# --------------------------------------------------------------------------
# Input normalization, output parametrization, optimizer
# --------------------------------------------------------------------------

NORMALIZATIONS = ("global", "none")


def normalize_input(x, mode="global"):
    """Map [0, 255] intensities to roughly [-1, 1] (``"global"``) or pass through."""
    if mode == "global":
        return (np.asarray(x, dtype=np.float64) - 127.5) / 127.5
    if mode == "none":
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown normalization {mode!r}")


def output_to_transform(raw, head):
    """Turn a raw 2-vector network output into a transformation.

    The translation head reads the output as a displacement in pixels from
    the patch center; the rotation head normalizes ``(a_u, a_v)`` to the
    rotation with cosine ``a_u / r`` and sine ``a_v / r``.
    """
    a = np.asarray(raw, dtype=np.float64).reshape(-1)
    if head == "translation":
        return Transform2D.translation(a[0], a[1])
    if head == "rotation":
        r = math.hypot(a[0], a[1])
        if not r > 1e-12:
            raise DegenerateOrientation("degenerate orientation")
        c, s = a[0] / r, a[1] / r
        return Transform2D([[c, -s], [s, c]])
    raise ValueError(f"unknown head {head!r}")


def sgd_step(params, grads, lr, momentum=0.9, velocity=None):
    """Momentum SGD: ``v' = momentum * v - lr * grad``, ``p' = p + v'``.

    Returns new ``(params, velocity)`` lists; inputs are not modified.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_v = [momentum * v - lr * g for v, g in zip(velocity, grads)]
    new_p = [p + v for p, v in zip(params, new_v)]
    return new_p, new_v


# --------------------------------------------------------------------------
# Model bundle and file format
# --------------------------------------------------------------------------

MAGIC = b"CVDT"
FORMAT_VERSION = 1


@dataclass
class Model:
    spec: NetworkSpec
    params: list
    head: str = "translation"
    normalization: str = "global"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")
        shapes = self.spec.param_shapes()
        if len(shapes) != len(self.params) or any(p.shape != s for p, s in zip(self.params, shapes)):
            raise ShapeError("architecture/shape error: parameters do not match network")

    def predict(self, patches, batch_size=512):
        """Raw outputs ``(N, out_dim)`` for ``(N, side, side)`` patches in [0, 255]."""
        patches = np.asarray(patches)
        out = []
        for i in range(0, len(patches), batch_size):
            x = normalize_input(patches[i : i + batch_size], self.normalization)
            y, _ = forward(self.spec, self.params, x, keep_cache=False)
            out.append(y.reshape(len(x), -1))
        if not out:
            return np.zeros((0, self.spec.out_dim))
        return np.concatenate(out)

    def save(self, path):
        header = {
            "spec": self.spec.to_dict(),
            "head": self.head,
            "normalization": self.normalization,
            "metadata": self.metadata,
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<I", len(hbytes)))
            f.write(hbytes)
            for p in self.params:
                f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        offset = 12 + hlen
        params = []
        for shape in spec.param_shapes():
            n = int(np.prod(shape))
            if len(data) < offset + 4 * n:
                raise ValueError(f"{path}: truncated parameter data")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            params.append(arr.astype(np.float64))
            offset += 4 * n
        if offset != len(data):
            raise ValueError(f"{path}: trailing bytes after parameters")
        return cls(spec, params, header["head"], header["normalization"], header.get("metadata", {}))
