"""Training data pipeline, covariance loss and the siamese training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import imgproc
from . import net

log = logging.getLogger(__name__)

CROP_SIZE = 57
PATCH_SIZE = 28
MAX_CENTER_OFFSET = 20
MIN_OVERLAP = 0.27


class EmptyCorpus(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


# --------------------------------------------------------------------------
# Crop harvesting
# --------------------------------------------------------------------------


@dataclass
class CropStore:
    crops: np.ndarray  # (N, 57, 57)
    provenance: list  # (source name, x, y) of each crop center

    def __len__(self):
        return len(self.crops)

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return CropStore(self.crops[mask], [p for p, m in zip(self.provenance, mask) if m])


def list_images(image_dir):
    names = sorted(n for n in os.listdir(image_dir) if n.lower().endswith(".pgm"))
    return [os.path.join(image_dir, n) for n in names]


def harvest_crops(image_dir, per_image=20, seed=0, sigma=imgproc.LOG_SIGMA, threshold=imgproc.LOG_THRESHOLD):
    """Draw ``per_image`` random 57x57 crops per image and keep the informative ones."""
    rng = np.random.default_rng(seed)
    crops, prov = [], []
    readable = 0
    for path in list_images(image_dir):
        try:
            img = imgproc.read_pgm(path)
        except (OSError, ValueError) as e:
            log.warning("skipping %s: %s", path, e)
            continue
        h, w = img.shape
        if h < CROP_SIZE or w < CROP_SIZE:
            log.warning("skipping %s: smaller than %d pixels", path, CROP_SIZE)
            continue
        readable += 1
        half = CROP_SIZE // 2
        for _ in range(per_image):
            cx = int(rng.integers(half, w - half))
            cy = int(rng.integers(half, h - half))
            crop = imgproc.extract_crop(img, (cx, cy), CROP_SIZE)
            if imgproc.crop_is_informative(crop, sigma, threshold):
                crops.append(crop)
                prov.append((os.path.basename(path), cx, cy))
    if readable == 0:
        raise EmptyCorpus(f"empty corpus: no readable images of side >= {CROP_SIZE} in {image_dir}")
    arr = np.stack(crops) if crops else np.zeros((0, CROP_SIZE, CROP_SIZE))
    return CropStore(arr, prov)


def split_validation(store, fraction=0.05):
    """Hold out crops by a stable hash of their provenance; returns ``(train, val)``."""
    buckets = np.array([zlib.crc32(f"{n}:{x}:{y}".encode()) % 10000 for n, x, y in store.provenance], dtype=np.int64)
    is_val = buckets < int(round(fraction * 10000))
    return store.subset(~is_val), store.subset(is_val)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JitterConfig:
    """Photometric distortion applied to the transformed patch.

    ``additive`` is a per-patch offset drawn from ``±additive`` intensity units
    (8% of 255); ``multiplicative`` scales each pixel by ``1 ± multiplicative``.
    """

    additive: float = 0.08 * 255
    multiplicative: float = 0.4
    enabled: bool = True

    def apply(self, patch, rng):
        if not self.enabled:
            return patch
        gain = rng.uniform(1 - self.multiplicative, 1 + self.multiplicative, size=patch.shape)
        return patch * gain + rng.uniform(-self.additive, self.additive)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    pairs_per_epoch: int = 40000
    lr: float = 0.01
    lr_drop_factor: float = 10.0
    max_epochs: int = 60
    seed: int = 0
    head: str = "translation"
    nuisance_translation_max: float = 0.0
    momentum: float = 0.9
    patience: int = 5
    min_rel_improvement: float = 1e-3
    max_lr_drops: int = 2
    val_pairs: int = 2000
    convention: str = "relative"
    normalization: str = "global"
    jitter_enabled: bool = True
    jitter_additive: float = 0.08 * 255
    jitter_multiplicative: float = 0.4

    def __post_init__(self):
        if self.head not in net.HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for name in ("batch_size", "pairs_per_epoch", "lr", "lr_drop_factor", "val_pairs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0 or self.nuisance_translation_max < 0:
            raise ValueError("max_epochs and nuisance_translation_max must be non-negative")
        geo.RotationConvention(self.convention)

    @property
    def constraint_class(self):
        if self.head == "translation":
            return geo.ConstraintClass.TRANSLATION
        return geo.ConstraintClass.ROTATION_ONLY

    @property
    def rotation_convention(self):
        return geo.RotationConvention(self.convention)

    @property
    def jitter(self):
        return JitterConfig(self.jitter_additive, self.jitter_multiplicative, self.jitter_enabled)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _parse_value(text, typ):
    if typ is bool or typ == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    return text


def parse_config_text(text, cls=TrainConfig):
    """Parse ``key=value`` lines into a dict of typed values for ``cls``.

    Blank lines and ``#`` comments are ignored; unknown keys raise ``ValueError``.
    """
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(value, types[key])
    return out


def load_config(path, cls=TrainConfig, **overrides):
    with open(path) as f:
        values = parse_config_text(f.read(), cls)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def format_config(cfg):
    return "\n".join(f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)) + "\n"


# --------------------------------------------------------------------------
# Triplet sampling
# --------------------------------------------------------------------------


@dataclass
class TripletSample:
    x1: np.ndarray
    x2: np.ndarray
    g: geo.Transform2D
    c1: tuple = (0, 0)  # patch center pixels in the crop
    c2: tuple = (0, 0)


def patch_overlap(d, side=PATCH_SIZE):
    dx, dy = abs(d[0]), abs(d[1])
    return max(side - dx, 0) * max(side - dy, 0) / side**2


def _allowed_displacements(max_offset=MAX_CENTER_OFFSET, min_overlap=MIN_OVERLAP):
    r = np.arange(-max_offset, max_offset + 1)
    dx, dy = np.meshgrid(r, r, indexing="xy")
    d = np.stack([dx.ravel(), dy.ravel()], axis=1)
    ov = (PATCH_SIZE - np.abs(d[:, 0])) * (PATCH_SIZE - np.abs(d[:, 1])) / PATCH_SIZE**2
    return d[ov >= min_overlap]


TRANSLATION_DISPLACEMENTS = _allowed_displacements()


def _disc_displacements(radius):
    r = int(math.floor(radius))
    v = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(v, v, indexing="xy")
    d = np.stack([dx.ravel(), dy.ravel()], axis=1)
    return d[(d**2).sum(axis=1) <= radius * radius + 1e-9]


def _patch_at(crop, c):
    half = PATCH_SIZE // 2
    x, y = c
    return crop[y - half : y - half + PATCH_SIZE, x - half : x - half + PATCH_SIZE]


def sample_triplet(crop, cfg, rng, rotation=None, displacement=None, c1=None):
    """Draw a training triplet ``(x1, x2, g)`` from a 57x57 crop.

    ``x2`` is ``g x1`` (plus photometric jitter) where ``g`` maps patch-local
    coordinates of ``x1`` to those of ``x2``. For the translation head,
    ``g = trans(c1 - c2)`` with both patch centers at most 20 pixels
    (Euclidean) from the crop center and the patches overlapping by at least
    27%. For the rotation head,
    ``x2`` is the crop rotated by a uniform random angle about the center of
    the second patch, whose center is displaced from the first by at most
    ``nuisance_translation_max`` pixels.

    ``rotation``, ``displacement`` (``c1 - c2``) and ``c1`` may be fixed for
    testing; otherwise they are sampled.
    """
    if crop.shape != (CROP_SIZE, CROP_SIZE):
        raise ValueError(f"expected a {CROP_SIZE}x{CROP_SIZE} crop, got {crop.shape}")
    center = CROP_SIZE // 2
    half = PATCH_SIZE // 2
    # patch centers that keep the patch inside the crop
    lo, hi = half - center, CROP_SIZE - (PATCH_SIZE - half) - center

    if cfg.head == "translation":
        if displacement is None:
            displacement = TRANSLATION_DISPLACEMENTS[rng.integers(len(TRANSLATION_DISPLACEMENTS))]
        d = np.asarray(displacement, dtype=int)
        while c1 is None:
            # c1 - center and c2 - center = c1 - d - center both in [lo, hi]
            ox = int(rng.integers(max(lo, lo + d[0]), min(hi, hi + d[0]) + 1))
            oy = int(rng.integers(max(lo, lo + d[1]), min(hi, hi + d[1]) + 1))
            if ox * ox + oy * oy <= MAX_CENTER_OFFSET**2 and (ox - d[0]) ** 2 + (oy - d[1]) ** 2 <= MAX_CENTER_OFFSET**2:
                c1 = (center + ox, center + oy)
        c2 = (c1[0] - int(d[0]), c1[1] - int(d[1]))
        x1 = _patch_at(crop, c1).copy()
        x2 = _patch_at(crop, c2).copy()
        g = geo.Transform2D.translation(float(d[0]), float(d[1]))
    else:
        theta = rng.uniform(-math.pi, math.pi) if rotation is None else rotation
        if displacement is None:
            choices = _disc_displacements(cfg.nuisance_translation_max)
            displacement = choices[rng.integers(len(choices))]
        d = np.asarray(displacement, dtype=int)
        if c1 is None:
            c1 = (center + int(rng.integers(-2, 3)), center + int(rng.integers(-2, 3)))
        c2 = (c1[0] - int(d[0]), c1[1] - int(d[1]))
        r = geo.Transform2D.rotation(theta)
        x1 = _patch_at(crop, c1).copy()
        # geometric center of an even patch sits half a pixel before its center pixel
        pc = (PATCH_SIZE - 1) / 2.0
        src = (c2[0] - half + pc, c2[1] - half + pc)
        x2 = imgproc.warp(crop, r, out_shape=(PATCH_SIZE, PATCH_SIZE), center=src, out_center=(pc, pc))
        g = geo.Transform2D(r.m, r.m @ d.astype(float))
    x2 = cfg.jitter.apply(x2, rng)
    return TripletSample(x1, x2, g, tuple(c1), tuple(c2))


@dataclass
class TripletBatch:
    x1: np.ndarray  # (N, 28, 28)
    x2: np.ndarray
    gm: np.ndarray  # (N, 2, 2) linear parts
    gt: np.ndarray  # (N, 2) translations

    def __len__(self):
        return len(self.x1)

    def transform(self, i):
        return geo.Transform2D(self.gm[i], self.gt[i])


def stack_triplets(triplets):
    return TripletBatch(
        np.stack([t.x1 for t in triplets]),
        np.stack([t.x2 for t in triplets]),
        np.stack([t.g.m for t in triplets]),
        np.stack([t.g.t for t in triplets]),
    )


def sample_triplets(store, n, cfg, rng):
    if len(store) == 0:
        raise EmptyCorpus("empty corpus: no crops to sample from")
    idx = rng.integers(len(store), size=n)
    return stack_triplets([sample_triplet(store.crops[i], cfg, rng) for i in idx])


# --------------------------------------------------------------------------
# Covariance loss
# --------------------------------------------------------------------------


def _rotation_terms(raw1, raw2, gm, convention):
    n1 = np.hypot(raw1[:, 0], raw1[:, 1])
    n2 = np.hypot(raw2[:, 0], raw2[:, 1])
    valid = (n1 > 1e-12) & (n2 > 1e-12)
    s1 = np.where(valid, n1, 1.0)
    s2 = np.where(valid, n2, 1.0)
    u1 = raw1 / s1[:, None]
    u2 = raw2 / s2[:, None]
    # relative angle theta1 - theta2 (relative) or theta2 - theta1 (composition)
    c12 = u1[:, 0] * u2[:, 0] + u1[:, 1] * u2[:, 1]
    s12 = u1[:, 1] * u2[:, 0] - u1[:, 0] * u2[:, 1]
    if convention is geo.RotationConvention.COMPOSITION:
        s12 = -s12
    cr, sr = gm[:, 0, 0], gm[:, 1, 0]
    cos_phi = c12 * cr + s12 * sr
    sin_phi = s12 * cr - c12 * sr
    return valid, n1, n2, cos_phi, sin_phi


def batch_covariance_loss(head, raw1, raw2, gm, gt, convention=geo.RotationConvention.RELATIVE):
    """Per-sample loss and gradients wrt the raw network outputs.

    Translation head: ``||p2 - p1 - T||^2``. Rotation head:
    ``||R2^T R1 - R||_F^2 = 4 (1 - cos(phi))`` with ``phi`` the angular error.
    Returns ``(loss, grad1, grad2, valid)``; invalid (degenerate orientation)
    samples carry zero loss and gradient.
    """
    raw1 = np.asarray(raw1, dtype=np.float64)
    raw2 = np.asarray(raw2, dtype=np.float64)
    if head == "translation":
        r = raw2 - raw1 - gt
        loss = np.sum(r * r, axis=1)
        return loss, -2 * r, 2 * r, np.ones(len(r), dtype=bool)
    valid, n1, n2, cos_phi, sin_phi = _rotation_terms(raw1, raw2, gm, convention)
    loss = np.where(valid, 4.0 * (1.0 - cos_phi), 0.0)
    # dL/dtheta1 = 4 sin(phi) (relative); the composition convention flips the sign
    dphi = np.where(valid, 4.0 * sin_phi, 0.0)
    if convention is geo.RotationConvention.COMPOSITION:
        dphi = -dphi
    sq1 = np.where(valid, n1 * n1, 1.0)
    sq2 = np.where(valid, n2 * n2, 1.0)
    # d theta / d a = (-a_v, a_u) / |a|^2
    g1 = dphi[:, None] * np.stack([-raw1[:, 1], raw1[:, 0]], axis=1) / sq1[:, None]
    g2 = -dphi[:, None] * np.stack([-raw2[:, 1], raw2[:, 0]], axis=1) / sq2[:, None]
    return loss, g1, g2, valid


def covariance_loss(cls, raw1, raw2, g, convention=geo.RotationConvention.RELATIVE):
    """Loss of one triplet and its gradients wrt the two raw outputs.

    The loss value comes from :func:`covdet.geometry.constraint_residual` on the
    transformations decoded from the raw outputs.
    """
    head = "translation" if cls is geo.ConstraintClass.TRANSLATION else "rotation"
    if cls not in (geo.ConstraintClass.TRANSLATION, geo.ConstraintClass.ROTATION_ONLY):
        raise NotImplementedError(f"no trainable head for {cls.value}")
    h1 = net.output_to_transform(raw1, head)
    h2 = net.output_to_transform(raw2, head)
    loss = geo.constraint_residual(cls, h1, h2, g, convention)
    _, g1, g2, _ = batch_covariance_loss(
        head, np.reshape(raw1, (1, 2)), np.reshape(raw2, (1, 2)), g.m[None], g.t[None], convention
    )
    return loss, g1[0], g2[0]


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def siamese_step(spec, params, batch, head, convention, normalization="global"):
    """Forward both branches with shared weights, return loss stats and gradients."""
    n = len(batch)
    x = net.normalize_input(np.concatenate([batch.x1, batch.x2]), normalization)
    out, cache = net.forward(spec, params, x)
    raw = out.reshape(2 * n, -1)
    loss, g1, g2, valid = batch_covariance_loss(head, raw[:n], raw[n:], batch.gm, batch.gt, convention)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, 0, None
    grad_out = (np.concatenate([g1, g2]) / n_valid).reshape(out.shape)
    grads, _ = net.backward(spec, params, cache, grad_out, need_input_grad=False)
    return float(loss.sum() / n_valid), n_valid, grads


def validate(model, triplets, cls=None, convention=None):
    """Mean covariance loss of ``model`` over a :class:`TripletBatch` (or list of samples)."""
    if not isinstance(triplets, TripletBatch):
        triplets = stack_triplets(list(triplets))
    if len(triplets) == 0:
        raise ValueError("validation needs at least one triplet")
    head = model.head if cls is None else ("translation" if cls is geo.ConstraintClass.TRANSLATION else "rotation")
    convention = geo.RotationConvention(model.metadata.get("convention", "relative")) if convention is None else convention
    raw1 = model.predict(triplets.x1)
    raw2 = model.predict(triplets.x2)
    loss, _, _, valid = batch_covariance_loss(head, raw1, raw2, triplets.gm, triplets.gt, convention)
    if not valid.any():
        return float("nan")
    return float(loss[valid].mean())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    skipped: int = 0


@dataclass
class TrainResult:
    model: net.Model
    history: list = field(default_factory=list)


def train(store, val_store, spec, cfg, checkpoint_dir=None, progress=None):
    """Train a regressor on triplets drawn from ``store``; select by validation loss.

    Triplets are resampled every epoch; the validation triplets are drawn once
    from ``val_store``. The learning rate drops by ``lr_drop_factor`` after
    ``patience`` epochs without relative improvement of ``min_rel_improvement``;
    after ``max_lr_drops`` drops training stops early.
    """
    if len(store) == 0 or len(val_store) == 0:
        raise EmptyCorpus("empty corpus: training and validation stores must be non-empty")
    convention = cfg.rotation_convention
    params = net.init_params(spec, cfg.seed)
    meta = {
        "convention": cfg.convention,
        "seed": cfg.seed,
        "nuisance_translation_max": cfg.nuisance_translation_max,
    }

    def make_model(p, **extra):
        return net.Model(spec, [a.copy() for a in p], cfg.head, cfg.normalization, {**meta, **extra})

    if cfg.max_epochs == 0:
        return TrainResult(make_model(params, epochs=0), [])

    val = sample_triplets(val_store, cfg.val_pairs, cfg, np.random.default_rng([cfg.seed, 1]))
    best_params, best_val = [p.copy() for p in params], math.inf
    ref_val = math.inf
    lr, drops, bad = cfg.lr, 0, 0
    velocity = None
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        data = sample_triplets(store, cfg.pairs_per_epoch, cfg, rng)
        order = rng.permutation(len(data))
        total, count, skipped = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            batch = TripletBatch(data.x1[sel], data.x2[sel], data.gm[sel], data.gt[sel])
            loss, n_valid, grads = siamese_step(spec, params, batch, cfg.head, convention, cfg.normalization)
            skipped += len(sel) - n_valid
            if grads is None:
                continue
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"divergence at epoch {epoch}", make_model(best_params, epochs=epoch - 1))
            params, velocity = net.sgd_step(params, grads, lr, cfg.momentum, velocity)
            total += loss * n_valid
            count += n_valid
        train_loss = total / max(count, 1)
        val_loss = validate(make_model(params), val, convention=convention)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"divergence at epoch {epoch}", make_model(best_params, epochs=epoch - 1))
        history.append(EpochRecord(epoch, train_loss, val_loss, lr, skipped))
        log.info("epoch %d train %.5f val %.5f lr %g skipped %d", epoch, train_loss, val_loss, lr, skipped)
        if progress is not None:
            progress(history[-1])
        if checkpoint_dir is not None:
            make_model(params, epochs=epoch).save(os.path.join(checkpoint_dir, f"model.{epoch:03d}.cvdt"))

        if val_loss < best_val:
            best_val, best_params = val_loss, [p.copy() for p in params]
        if val_loss < ref_val * (1 - cfg.min_rel_improvement):
            ref_val, bad = val_loss, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                if drops >= cfg.max_lr_drops:
                    log.info("validation stalled after %d learning-rate drops, stopping", drops)
                    break
                lr /= cfg.lr_drop_factor
                drops += 1
                bad = 0
    return TrainResult(make_model(best_params, epochs=len(history), best_val_loss=best_val), history)
