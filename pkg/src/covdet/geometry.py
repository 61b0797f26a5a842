"""2D affine transformation groups and covariance-constraint residuals.

Every transformation is a :class:`Transform2D` holding a 2x2 linear part ``m``
and a translation ``t``; it acts on points ``(x, y)`` as ``m @ p + t``.
Subgroups are not separate types, membership is checked by predicate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


class NonInvertibleTransform(GeometryError):
    pass


class NotGroupMember(GeometryError):
    pass


class DegenerateDecomposition(GeometryError):
    pass


def _frozen(a, shape):
    a = np.array(a, dtype=np.float64).reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Transform2D:
    """Affine map ``p -> m @ p + t`` of the plane."""

    m: np.ndarray = field(default_factory=lambda: np.eye(2))
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        m = _frozen(self.m, (2, 2))
        t = _frozen(self.t, (2,))
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(t))):
            raise GeometryError("transform entries must be finite")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "t", t)

    # constructors

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.eye(2), (tx, ty))

    @classmethod
    def rotation(cls, angle, t=(0.0, 0.0)):
        c, s = math.cos(angle), math.sin(angle)
        return cls([[c, -s], [s, c]], t)

    @classmethod
    def scaling(cls, s, t=(0.0, 0.0)):
        return cls(s * np.eye(2), t)

    @classmethod
    def from_matrix(cls, h):
        h = np.asarray(h, dtype=np.float64)
        if h.shape != (3, 3):
            raise GeometryError(f"expected a 3x3 homogeneous matrix, got {h.shape}")
        if not np.allclose(h[2], [0.0, 0.0, 1.0], atol=1e-12):
            raise GeometryError("last row of a homogeneous affine matrix must be (0, 0, 1)")
        return cls(h[:2, :2], h[:2, 2])

    # algebra

    @property
    def matrix(self):
        h = np.eye(3)
        h[:2, :2] = self.m
        h[:2, 2] = self.t
        return h

    @property
    def det(self):
        return float(np.linalg.det(self.m))

    def __matmul__(self, other):
        return compose(self, other)

    def apply(self, points):
        """Map an ``(N, 2)`` array (or a single point) of ``(x, y)`` coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.m.T + self.t

    def allclose(self, other, tol=1e-9):
        return bool(np.all(np.abs(self.m - other.m) <= tol) and np.all(np.abs(self.t - other.t) <= tol))

    def __repr__(self):
        return f"Transform2D(m={self.m.tolist()}, t={self.t.tolist()})"

    # serialization: "m11 m12 m21 m22 t1 t2"

    def to_text(self):
        vals = [*self.m.ravel(), *self.t]
        return " ".join(f"{v:.6f}" for v in vals)

    @classmethod
    def from_text(cls, text):
        fields = text.split()
        if len(fields) != 6:
            raise GeometryError(f"expected 6 fields 'm11 m12 m21 m22 t1 t2', got {len(fields)}")
        v = [float(f) for f in fields]
        return cls([[v[0], v[1]], [v[2], v[3]]], v[4:6])


def compose(a, b):
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return Transform2D(a.m @ b.m, a.m @ b.t + a.t)


def inverse(a):
    d = np.linalg.det(a.m)
    if not np.isfinite(d) or abs(d) < 1e-12 * max(1.0, np.abs(a.m).max() ** 2):
        raise NonInvertibleTransform("non-invertible transform")
    mi = np.linalg.inv(a.m)
    return Transform2D(mi, -mi @ a.t)


def rotation_angle(a):
    """Angle (radians) of the rotation closest to the linear part of ``a``."""
    m = a.m
    return math.atan2(m[1, 0] - m[0, 1], m[0, 0] + m[1, 1])


# --------------------------------------------------------------------------
# Groups
# --------------------------------------------------------------------------


class GroupId(enum.Enum):
    TRIVIAL = "Trivial"
    T2 = "T2"
    SO2 = "SO2"
    SE2 = "SE2"
    DIL2 = "Dil2"
    SIM2 = "Sim2"
    UA2 = "UA2"
    A2 = "A2"

    @property
    def dim(self):
        return _GROUP_DIM[self]


_GROUP_DIM = {
    GroupId.TRIVIAL: 0,
    GroupId.T2: 2,
    GroupId.SO2: 1,
    GroupId.SE2: 3,
    GroupId.DIL2: 3,
    GroupId.SIM2: 4,
    GroupId.UA2: 5,
    GroupId.A2: 6,
}


def _linear_ok(m, group, tol):
    if group in (GroupId.TRIVIAL, GroupId.T2):
        return np.all(np.abs(m - np.eye(2)) <= tol)
    if group in (GroupId.SO2, GroupId.SE2):
        return np.all(np.abs(m.T @ m - np.eye(2)) <= tol) and np.linalg.det(m) > 0
    if group is GroupId.DIL2:
        return abs(m[0, 1]) <= tol and abs(m[1, 0]) <= tol and abs(m[0, 0] - m[1, 1]) <= tol and m[0, 0] > 0
    if group is GroupId.SIM2:
        return abs(m[0, 0] - m[1, 1]) <= tol and abs(m[0, 1] + m[1, 0]) <= tol and np.linalg.det(m) > 0
    if group is GroupId.UA2:
        return abs(m[0, 1]) <= tol and m[0, 0] > 0 and m[1, 1] > 0
    if group is GroupId.A2:
        # orientation-preserving affinities: the only ones factorizable as UA2 x SO2
        return np.linalg.det(m) > 0
    raise ValueError(f"unknown group {group!r}")


def is_member(a, group, tol=1e-9):
    """True if ``a`` lies within ``tol`` (entrywise) of ``group``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if group in (GroupId.TRIVIAL, GroupId.SO2) and np.any(np.abs(a.t) > tol):
        return False
    return bool(_linear_ok(a.m, group, tol))


@dataclass(frozen=True)
class GroupBounds:
    """Parameter ranges for :func:`random_element`."""

    max_translation: float = 10.0
    max_angle: float = math.pi
    log_scale: float = 0.5
    max_shear: float = 0.5


def random_element(group, bounds=GroupBounds(), seed=None):
    """Draw a random member of ``group``; deterministic for a fixed integer seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = bounds

    def angle():
        return rng.uniform(-b.max_angle, b.max_angle)

    def scale():
        return math.exp(rng.uniform(-b.log_scale, b.log_scale))

    def trans():
        return rng.uniform(-b.max_translation, b.max_translation, size=2)

    def rot(th):
        c, s = math.cos(th), math.sin(th)
        return np.array([[c, -s], [s, c]])

    def upright():
        return np.array([[scale(), 0.0], [rng.uniform(-b.max_shear, b.max_shear), scale()]])

    if group is GroupId.TRIVIAL:
        return Transform2D()
    if group is GroupId.T2:
        return Transform2D(np.eye(2), trans())
    if group is GroupId.SO2:
        return Transform2D(rot(angle()))
    if group is GroupId.SE2:
        return Transform2D(rot(angle()), trans())
    if group is GroupId.DIL2:
        return Transform2D(scale() * np.eye(2), trans())
    if group is GroupId.SIM2:
        return Transform2D(scale() * rot(angle()), trans())
    if group is GroupId.UA2:
        return Transform2D(upright(), trans())
    if group is GroupId.A2:
        return Transform2D(upright() @ rot(angle()), trans())
    raise ValueError(f"unknown group {group!r}")


# --------------------------------------------------------------------------
# Detector classes and the complement decomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorSpec:
    """Covariance group ``g_group``, resolved subgroup ``h_group``, complement ``q_group``."""

    g_group: GroupId
    h_group: GroupId
    q_group: GroupId


class ConstraintClass(enum.Enum):
    TRANSLATION = "Translation"
    EUCLIDEAN = "Euclidean"
    SIFT = "Sift"
    ORIENTED_SIFT = "OrientedSift"
    UPRIGHT_AFFINE = "UprightAffine"
    FULL_AFFINE = "FullAffine"
    ROTATION_ONLY = "RotationOnly"

    @property
    def spec(self):
        return _CLASS_SPECS[self]


G = GroupId
_CLASS_SPECS = {
    ConstraintClass.TRANSLATION: DetectorSpec(G.T2, G.T2, G.TRIVIAL),
    ConstraintClass.EUCLIDEAN: DetectorSpec(G.SE2, G.T2, G.SO2),
    ConstraintClass.SIFT: DetectorSpec(G.SIM2, G.DIL2, G.SO2),
    ConstraintClass.ORIENTED_SIFT: DetectorSpec(G.SIM2, G.SIM2, G.TRIVIAL),
    ConstraintClass.UPRIGHT_AFFINE: DetectorSpec(G.A2, G.UA2, G.SO2),
    ConstraintClass.FULL_AFFINE: DetectorSpec(G.A2, G.A2, G.TRIVIAL),
    ConstraintClass.ROTATION_ONLY: DetectorSpec(G.SE2, G.SO2, G.T2),
}
del G

# classes whose complement q is fixed by g alone (H normal in G with H∩Q={1}, or Q trivial)
UNIQUE_COMPLEMENT = frozenset(
    {
        ConstraintClass.TRANSLATION,
        ConstraintClass.EUCLIDEAN,
        ConstraintClass.SIFT,
        ConstraintClass.ORIENTED_SIFT,
        ConstraintClass.FULL_AFFINE,
    }
)


class RotationConvention(enum.Enum):
    """How the relative rotation is read off two regressed orientations.

    ``RELATIVE`` uses ``R2^T R1 = R``; ``COMPOSITION`` uses ``R2 R1^T = R``, which is
    what the general complement constraint gives when ``q`` is a translation.
    """

    RELATIVE = "relative"
    COMPOSITION = "composition"


def spec_for(cls_or_spec):
    return cls_or_spec.spec if isinstance(cls_or_spec, ConstraintClass) else cls_or_spec


def _check(a, group, what):
    if not is_member(a, group, 1e-6):
        raise NotGroupMember(f"not a group member: {what} is not in {group.value}")


def upright_rotation_factor(b):
    """Factor ``b = lower @ rot`` with ``lower`` lower-triangular, positive diagonal.

    This is Gram-Schmidt on the rows of ``b`` (a QR decomposition of ``b.T``) with
    the sign convention fixing a positive diagonal.
    """
    b = np.asarray(b, dtype=np.float64)
    d = np.linalg.det(b)
    scale = np.abs(b).max()
    if not np.isfinite(d) or d <= 1e-12 * max(scale, 1e-300) ** 2:
        raise DegenerateDecomposition("degenerate decomposition")
    r1 = b[0]
    n1 = math.hypot(*r1)
    l1 = r1 / n1
    l2 = np.array([-l1[1], l1[0]])  # +90 degrees from l1 keeps det(rot) = +1
    lower = np.array([[n1, 0.0], [b[1] @ l1, b[1] @ l2]])
    rot = np.vstack([l1, l2])
    return lower, rot


def decompose(g, h1, spec):
    """Solve ``h2 ∘ q = g ∘ h1`` with ``h2`` in H and ``q`` in Q.

    Returns ``(h2, q)`` such that ``h2 q h1^-1 g^-1 = 1``.
    """
    spec = spec_for(spec)
    _check(g, spec.g_group, "g")
    _check(h1, spec.h_group, "h1")
    gh = compose(g, h1)
    G = GroupId
    key = (spec.h_group, spec.q_group)

    if spec.q_group is G.TRIVIAL:
        h2, q = gh, Transform2D()
    elif key == (G.T2, G.SO2):
        h2, q = Transform2D(np.eye(2), gh.t), Transform2D(gh.m)
    elif key == (G.DIL2, G.SO2):
        s = math.sqrt(np.linalg.det(gh.m))
        h2, q = Transform2D(s * np.eye(2), gh.t), Transform2D(gh.m / s)
    elif key == (G.UA2, G.SO2):
        lower, rot = upright_rotation_factor(gh.m)
        h2, q = Transform2D(lower, gh.t), Transform2D(rot)
    elif key == (G.SO2, G.T2):
        # (R2, 0)(I, T') = (R2, R2 T') = (R R1, T)
        h2 = Transform2D(gh.m)
        q = Transform2D(np.eye(2), gh.m.T @ gh.t)
    else:
        raise NotImplementedError(f"no decomposition rule for {spec}")
    return h2, q


def _best_rotation(c):
    """Rotation ``l`` maximizing ``trace(l.T @ c)`` (2D special Procrustes)."""
    th = math.atan2(c[1, 0] - c[0, 1], c[0, 0] + c[1, 1])
    co, si = math.cos(th), math.sin(th)
    return np.array([[co, -si], [si, co]])


def constraint_residual(cls, h1, h2, g, convention=RotationConvention.RELATIVE):
    """Squared Frobenius distance of the covariance residual from the identity.

    Computes ``min_q ||g h1 - h2 q||_F^2`` on homogeneous matrices. For classes
    with a unique complement the ``q`` from :func:`decompose` is substituted. For
    ``ROTATION_ONLY`` the value is ``||R2^T R1 - R||_F^2`` (or ``||R2 R1^T - R||_F^2``
    under ``RotationConvention.COMPOSITION``).
    """
    spec = cls.spec
    _check(g, spec.g_group, "g")
    _check(h1, spec.h_group, "h1")
    _check(h2, spec.h_group, "h2")

    if cls is ConstraintClass.ROTATION_ONLY:
        r1, r2 = h1.m, h2.m
        rel = r2.T @ r1 if convention is RotationConvention.RELATIVE else r2 @ r1.T
        return float(np.sum((rel - g.m) ** 2))

    gh = compose(g, h1).matrix
    if cls in UNIQUE_COMPLEMENT:
        _, q = decompose(g, h1, spec)
        qm = q.matrix
    elif cls is ConstraintClass.UPRIGHT_AFFINE:
        # q = (L, 0): minimize ||A M1 - M2 L||^2 over rotations L
        qm = np.eye(3)
        qm[:2, :2] = _best_rotation(h2.m.T @ gh[:2, :2])
    else:
        raise NotImplementedError(cls)
    return float(np.sum((gh - h2.matrix @ qm) ** 2))
