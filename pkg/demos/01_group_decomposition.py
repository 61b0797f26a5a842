"""Residual transformations under each constraint class.

A detector that regresses a frame h from a patch must satisfy
h(g x) = g h(x) q for some residual q it cannot observe. ``decompose``
recovers (h2, q) from g and h1; this script prints one case per class
and the upright-affine pair whose residual is not unique.

    python3 demos/01_group_decomposition.py
"""

import numpy as np

from covdet import checks
from covdet import geometry as geo

rng = np.random.default_rng(0)
np.set_printoptions(precision=3, suppress=True)

for cls in geo.ConstraintClass:
    spec = cls.spec
    g = geo.random_element(spec.g_group, seed=rng)
    h1 = geo.random_element(spec.h_group, seed=rng)
    h2, q = geo.decompose(g, h1, spec)
    residual = geo.compose(h2, geo.compose(q, geo.inverse(geo.compose(g, h1))))
    print(f"{cls.name:14s} G={spec.g_group.value:5s} H={spec.h_group.value:5s} Q={spec.q_group.value:7s}", end=" ")
    print(f"|h2 q (g h1)^-1 - I| = {np.abs(residual.matrix - np.eye(3)).max():.1e}")

q, qp = checks.upright_affine_witness()
print("\nupright affine: same g, two frames h1, two different residual rotations")
print("q  =", geo.rotation_angle(q), "rad")
print("q' =", geo.rotation_angle(qp), "rad")

failures = checks.group_algebra_check(n=200)
print(f"\ngroup algebra check, 200 cases per group/class: {len(failures)} failures")
