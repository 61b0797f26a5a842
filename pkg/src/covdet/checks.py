"""Numerical self-checks shared by the test suite and ``covdet selfcheck``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import net, training

# Gradients smaller than this are compared in absolute terms (1e-6 * floor).
GRAD_FLOOR = 1e-4


def relative_error(analytic, numeric, floor=GRAD_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, x, index, h=1e-5):
    """Central finite difference of scalar ``f()`` wrt ``x[index]`` (perturbed in place)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_kinks: int = 0  # coordinates skipped because the step crossed a ReLU or max-pool switch


def activation_pattern(spec, params, x):
    """ReLU signs and max-pool winners; the network is smooth while these stay fixed."""
    _, cache = net.forward(spec, params, x)
    pattern = []
    for layer, rec in zip(spec.layers, cache.records):
        if layer.kind == "relu":
            pattern.append(rec > 0)
        elif layer.kind == "maxpool2":
            pattern.append(rec[1])
    return pattern


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def _compare(arrays, grads, objective, pattern, rng, max_coords, h):
    """Central differences of ``objective()`` against ``grads`` for every array in ``arrays``.

    Coordinates whose +h or -h step changes ``pattern()`` straddle a kink where
    the objective is not differentiable; they are counted and skipped.
    """
    base = pattern()
    worst, count, kinks = 0.0, 0, 0
    for arr, g in zip(arrays, grads):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            fp, pp = objective(), pattern()
            flat[k] = old - h
            fm, pm = objective(), pattern()
            flat[k] = old
            if not (_same_pattern(base, pp) and _same_pattern(base, pm)):
                kinks += 1
                continue
            worst = max(worst, float(relative_error(gflat[k], (fp - fm) / (2 * h))))
            count += 1
    return GradCheckResult(worst, count, kinks)


def network_gradient_check(spec, seed, batch=2, side=None, max_coords=None, h=1e-5):
    """Compare analytic network gradients with central differences.

    The scalar objective is a fixed random projection of the output. Every
    parameter and input coordinate is checked unless ``max_coords`` caps the
    count per array, in which case a seeded random subset is used.
    """
    rng = np.random.default_rng(seed)
    side = spec.input_side if side is None else side
    params = net.init_params(spec, seed)
    for i in range(1, len(params), 2):
        params[i] = rng.normal(0.0, 0.1, size=params[i].shape)
    x = rng.normal(size=(batch, side, side, spec.in_channels))
    out, cache = net.forward(spec, params, x)
    proj = rng.normal(size=out.shape)
    grads, gx = net.backward(spec, params, cache, proj)

    def objective():
        return float(np.sum(net.forward(spec, params, x, keep_cache=False)[0] * proj))

    return _compare([*params, x], [*grads, gx], objective, lambda: activation_pattern(spec, params, x), rng, max_coords, h)


def siamese_gradient_check(spec, head, seed, batch=2, max_coords=None, h=None, convention=geo.RotationConvention.RELATIVE):
    """Central differences of the siamese covariance loss against its parameter gradients."""
    if h is None:
        # between kinks the translation loss is quadratic in each parameter, so a
        # larger step costs no truncation error and cuts roundoff
        h = 1e-4 if head == "translation" else 1e-5
    rng = np.random.default_rng(seed)
    params = net.init_params(spec, seed)
    for i in range(1, len(params), 2):
        params[i] = rng.normal(0.0, 0.1, size=params[i].shape)
    side = spec.input_side
    # unit-scale transforms keep the loss O(1) so roundoff stays below the tolerance
    if head == "translation":
        gs = [geo.Transform2D.translation(*rng.uniform(-1, 1, size=2)) for _ in range(batch)]
    else:
        gs = [geo.Transform2D.rotation(rng.uniform(-math.pi, math.pi), rng.uniform(-1, 1, size=2)) for _ in range(batch)]
    samples = [
        training.TripletSample(rng.uniform(0, 255, (side, side)), rng.uniform(0, 255, (side, side)), g, (0, 0), (0, 0))
        for g in gs
    ]
    tb = training.stack_triplets(samples)
    _, _, grads = training.siamese_step(spec, params, tb, head, convention)
    x = net.normalize_input(np.concatenate([tb.x1, tb.x2]))

    def objective():
        return training.siamese_step(spec, params, tb, head, convention)[0]

    return _compare(params, grads, objective, lambda: activation_pattern(spec, params, x), rng, max_coords, h)


def group_algebra_check(n=1000, seed=0, tol=1e-9):
    """Group axioms, complement existence and uniqueness; returns failure messages."""
    rng = np.random.default_rng(seed)
    failures = []
    for group in geo.GroupId:
        for _ in range(n):
            a, b, c = (geo.random_element(group, seed=rng) for _ in range(3))
            ok = (
                geo.is_member(geo.compose(a, b), group, tol)
                and geo.is_member(geo.inverse(a), group, tol)
                and geo.compose(a, geo.inverse(a)).allclose(geo.Transform2D(), tol)
                and geo.compose(geo.compose(a, b), c).allclose(geo.compose(a, geo.compose(b, c)), tol)
            )
            if not ok:
                failures.append(f"group axioms fail for {group.value}: {a}, {b}, {c}")
                break
    for cls in geo.ConstraintClass:
        spec = cls.spec
        for _ in range(n):
            g = geo.random_element(spec.g_group, seed=rng)
            h1 = geo.random_element(spec.h_group, seed=rng)
            h2, q = geo.decompose(g, h1, spec)
            r = geo.compose(h2, geo.compose(q, geo.compose(geo.inverse(h1), geo.inverse(g))))
            if not (
                r.allclose(geo.Transform2D(), tol)
                and geo.is_member(h2, spec.h_group, tol)
                and geo.is_member(q, spec.q_group, tol)
            ):
                failures.append(f"decomposition fails for {cls.value}: g={g}, h1={h1}")
                break
    for cls in (geo.ConstraintClass.EUCLIDEAN, geo.ConstraintClass.SIFT):
        spec = cls.spec
        for _ in range(n):
            g = geo.random_element(spec.g_group, seed=rng)
            _, qa = geo.decompose(g, geo.random_element(spec.h_group, seed=rng), spec)
            _, qb = geo.decompose(g, geo.random_element(spec.h_group, seed=rng), spec)
            if not qa.allclose(qb, tol):
                failures.append(f"complement not unique for {cls.value}: g={g}")
                break
    return failures


def upright_affine_witness():
    """Return ``(q, q')`` from one ``g`` and two ``h1``: the complements differ."""
    spec = geo.ConstraintClass.UPRIGHT_AFFINE.spec
    g = geo.Transform2D([[1.0, 0.7], [0.0, 1.0]], [0.0, 0.0])
    _, q = geo.decompose(g, geo.Transform2D(), spec)
    _, qp = geo.decompose(g, geo.Transform2D([[1.0, 0.0], [1.5, 2.0]], [3.0, 1.0]), spec)
    return q, qp

