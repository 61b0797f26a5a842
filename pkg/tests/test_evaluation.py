import math

import numpy as np
import pytest

from covdet import geometry as geo
from covdet import net
from covdet.detect import Detection
from covdet.evaluation import (
    EmptyDetections,
    ImagePair,
    MetricCurve,
    angular_error,
    angular_error_from_outputs,
    build_curves,
    harris_detect,
    harris_response,
    load_pairs,
    matching_score,
    max_matching,
    patch_descriptor,
    random_detections,
    read_pair_list,
    repeatability,
    wrap_angle_deg,
    write_metrics_csv,
    write_pair_list,
)
from covdet.imgproc import write_pgm

IDENTITY = geo.Transform2D.identity()


def dets_from(points):
    return [Detection(float(x), float(y), float(len(points) - i)) for i, (x, y) in enumerate(points)]


def mapped(dets, h):
    pts = h.apply(np.array([[d.x, d.y] for d in dets]))
    return [Detection(float(x), float(y), d.confidence) for (x, y), d in zip(pts, dets)]


def blocky(seed, h=120, w=120, block=4):
    rng = np.random.default_rng(seed)
    return np.kron(rng.uniform(0, 255, size=(h // block, w // block)), np.ones((block, block)))


# -- repeatability -------------------------------------------------------------------


def test_repeatability_mapped_is_one():
    rng = np.random.default_rng(0)
    a = dets_from(rng.uniform(10, 90, size=(30, 2)))
    h = geo.Transform2D([[0.9, 0.1], [-0.2, 1.1]], [4.0, -3.0])
    assert repeatability(a, mapped(a, h), h, n=30) == 1.0


def test_repeatability_disjoint_is_zero():
    a = dets_from([(10, 10), (20, 20)])
    b = dets_from([(60, 60), (80, 80)])
    assert repeatability(a, b, IDENTITY, dist_tol=5) == 0.0


def test_repeatability_half():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 200, size=(10, 2))
    a = dets_from(pts)
    b_pts = pts.copy()
    b_pts[5:] += 50.0  # move half far away
    assert repeatability(a, dets_from(b_pts), IDENTITY, dist_tol=5, n=10) == 0.5


def test_repeatability_top_n_and_min_denominator():
    a = dets_from([(0, 0), (10, 0), (20, 0), (30, 0)])
    b = dets_from([(0, 0), (10, 0)])
    assert repeatability(a, b, IDENTITY, n=4) == 1.0  # min(4, 2) = 2
    assert repeatability(a, b, IDENTITY, n=1) == 1.0
    c = dets_from([(30, 0), (0, 0)])
    assert repeatability(a, c, IDENTITY, n=1) == 0.0


def test_repeatability_one_to_one():
    a = dets_from([(0, 0), (1, 0)])
    b = dets_from([(0.5, 0)])
    assert repeatability(a, b, IDENTITY) == 1.0  # one match, min(2, 1) = 1
    a3 = dets_from([(0, 0), (1, 0), (2, 0)])
    b2 = dets_from([(0.5, 0), (40, 0)])
    assert repeatability(a3, b2, IDENTITY) == 0.5


def test_repeatability_maximum_assignment():
    # greedy-by-distance would pair (0,0)-(2,0) and leave (4,0) unmatched
    a = dets_from([(0, 0), (4.5, 0)])
    b = dets_from([(2, 0), (-2.9, 0)])
    assert repeatability(a, b, IDENTITY, dist_tol=3) == 1.0


def test_repeatability_outside_b_not_counted():
    a = dets_from([(5, 5), (50, 50)])
    h = geo.Transform2D.translation(-10, 0)
    b = mapped(a, h)
    assert repeatability(a, b, h, shape_b=(100, 100)) == 0.5
    assert repeatability(a, b, h) == 1.0


def test_repeatability_symmetric():
    rng = np.random.default_rng(2)
    a = dets_from(rng.uniform(0, 100, size=(20, 2)))
    h = geo.Transform2D.rotation(0.4, (3, 7))
    b = mapped(a, h)
    b = [Detection(d.x + 0.5, d.y - 0.3, d.confidence) for d in b]
    assert repeatability(a, b, h) == repeatability(b, a, geo.inverse(h)) == 1.0


def test_repeatability_empty_warns():
    with pytest.warns(EmptyDetections):
        assert repeatability([], dets_from([(0, 0)]), IDENTITY) == 0.0
    with pytest.raises(ValueError):
        repeatability(dets_from([(0, 0)]), dets_from([(0, 0)]), IDENTITY, n=0)


def test_max_matching_brute_force():
    rng = np.random.default_rng(3)
    from itertools import permutations

    for _ in range(30):
        d = rng.uniform(0, 2, size=(4, 4))
        d[d > 1] = np.inf
        best = max(sum(np.isfinite(d[i, p[i]]) for i in range(4)) for p in permutations(range(4)))
        assert len(max_matching(d)) == best


# -- descriptors and matching score -------------------------------------------------------


def test_descriptor_properties():
    img = blocky(0)
    d = Detection(50.0, 60.0, 1.0)
    v = patch_descriptor(img, d)
    assert v.shape == (64,)
    assert abs(v.mean()) < 1e-12 and abs(np.linalg.norm(v) - 1) < 1e-12
    np.testing.assert_allclose(patch_descriptor(0.5 * img + 40, d), v, atol=1e-12)
    assert not np.any(patch_descriptor(np.full((100, 100), 7.0), d))
    assert patch_descriptor(img, Detection(10.0, 60.0, 1.0)) is None
    assert patch_descriptor(img, Detection(20.0, 20.0, 1.0)) is not None


def test_descriptor_area_average_oracle():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 255, size=(60, 60))
    v = patch_descriptor(img, Detection(30.0, 30.0, 1.0))
    patch = img[10:51, 10:51]
    # oracle: integrate the piecewise-constant patch over each 41/8-wide bin
    fine = np.kron(patch, np.ones((8, 8)))  # each bin is exactly 41 x 41 fine cells
    ref = fine.reshape(8, 41, 8, 41).mean(axis=(1, 3)).ravel()
    ref = (ref - ref.mean()) / np.linalg.norm(ref - ref.mean())
    np.testing.assert_allclose(v, ref, atol=1e-12)


def test_matching_score_shifted_image():
    img_a = blocky(5, 160, 160)
    h = geo.Transform2D.translation(7, -5)
    img_b = np.zeros_like(img_a)
    img_b[:-5, 7:] = img_a[5:, :-7]
    rng = np.random.default_rng(6)
    a = dets_from(np.round(rng.uniform(30, 120, size=(25, 2))))
    b = mapped(a, h)
    assert matching_score(a, b, img_a, img_b, h) == 1.0
    assert matching_score(a[:1], b[:1], img_a, img_b, h, n=1) == 1.0


def test_matching_score_unrelated_image_near_zero():
    img_a = blocky(7, 240, 240)
    img_b = blocky(8, 240, 240)
    rng = np.random.default_rng(9)
    a = dets_from(rng.uniform(22, 217, size=(100, 2)))
    assert matching_score(a, a, img_a, img_b, IDENTITY, n=100) < 0.05


def test_matching_not_above_repeatability():
    rng = np.random.default_rng(10)
    for trial in range(20):
        img_a = blocky(trial, 120, 120)
        h = geo.Transform2D.translation(*rng.integers(-3, 4, size=2))
        img_b = img_a + rng.normal(0, 20, size=img_a.shape)
        a = dets_from(rng.uniform(20, 100, size=(30, 2)))
        b = dets_from(rng.uniform(20, 100, size=(30, 2)))
        n = int(rng.integers(1, 31))
        assert matching_score(a, b, img_a, img_b, h, n=n) <= repeatability(a, b, h, n=n, shape_b=img_b.shape)


# -- angular error ---------------------------------------------------------------------------


def test_wrap_examples():
    assert wrap_angle_deg(350 - 10) == 20
    assert wrap_angle_deg(-190) == 170
    assert wrap_angle_deg(180) == 180
    assert wrap_angle_deg(720) == 0


def test_angular_error_perfect_and_wrap():
    true = np.array([0.3, -2.0, 3.0])
    t2 = np.array([1.0, 0.5, -1.2])
    t1 = t2 + true  # relative convention: theta1 - theta2 = truth
    raw1 = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    raw2 = 3 * np.stack([np.cos(t2), np.sin(t2)], axis=1)
    mean, median, skipped = angular_error_from_outputs(raw1, raw2, true)
    assert mean == pytest.approx(0, abs=1e-9) and median == pytest.approx(0, abs=1e-9) and skipped == 0
    # estimate 350 deg, truth 10 deg -> 20 deg
    e = math.radians(350)
    mean, _, _ = angular_error_from_outputs([[math.cos(e), math.sin(e)]], [[1, 0]], [math.radians(10)])
    assert mean == pytest.approx(20)


def test_angular_error_constant_estimator_is_90():
    rng = np.random.default_rng(0)
    true = rng.uniform(-math.pi, math.pi, size=200000)
    raw = np.tile([1.0, 0.0], (len(true), 1))
    mean, median, _ = angular_error_from_outputs(raw, raw, true)
    assert mean == pytest.approx(90, abs=0.5)
    assert median == pytest.approx(90, abs=1.0)


def test_angular_error_invariant_to_common_rotation():
    rng = np.random.default_rng(1)
    t1, t2, true = rng.uniform(-3, 3, size=(3, 50))
    base = angular_error_from_outputs(np.c_[np.cos(t1), np.sin(t1)], np.c_[np.cos(t2), np.sin(t2)], true)
    s = 1.234
    moved = angular_error_from_outputs(
        np.c_[np.cos(t1 + s), np.sin(t1 + s)], np.c_[np.cos(t2 + s), np.sin(t2 + s)], true
    )
    assert moved[0] == pytest.approx(base[0]) and moved[1] == pytest.approx(base[1])


def test_angular_error_skips_degenerate_and_conventions():
    raw1 = np.array([[0.0, 0.0], [1.0, 0.0]])
    raw2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    mean, _, skipped = angular_error_from_outputs(raw1, raw2, [0.0, -math.pi / 2])
    assert skipped == 1 and mean == pytest.approx(0)
    mean, _, _ = angular_error_from_outputs(raw1, raw2, [0.0, math.pi / 2], geo.RotationConvention.COMPOSITION)
    assert mean == pytest.approx(0)


def test_angular_error_model_head_check():
    spec = net.detnet_micro()
    model = net.Model(spec, net.init_params(spec, 0), head="rotation")
    x = np.random.default_rng(0).uniform(0, 255, size=(4, 28, 28))
    mean, median, skipped = angular_error(model, x, x, np.zeros(4))
    assert mean == pytest.approx(0, abs=1e-9) and skipped == 0
    with pytest.raises(ValueError):
        angular_error(net.Model(spec, net.init_params(spec, 0)), x, x, np.zeros(4))


# -- Harris ------------------------------------------------------------------------------------


def test_harris_constant_image_empty():
    assert harris_detect(np.full((50, 50), 100.0)) == []


def test_harris_l_corner():
    img = np.full((60, 60), 200.0)
    img[:30, :25] = 20.0
    img[30:, 25:] = 20.0  # two dark quadrants meeting at the vertex (24.5, 29.5)
    dets = harris_detect(img, max_detections=1)
    assert math.hypot(dets[0].x - 24.5, dets[0].y - 29.5) <= 2


def test_harris_rotation_covariance():
    img = blocky(11, 128, 128, block=8)
    rot = np.rot90(img)  # counter-clockwise: b(x', y') with x' = y, y' = W - 1 - x
    h = geo.Transform2D([[0.0, 1.0], [-1.0, 0.0]], [0.0, img.shape[1] - 1])
    a = harris_detect(img, max_detections=50)
    b = harris_detect(rot, max_detections=50)
    assert repeatability(a, b, h, dist_tol=2, n=50) >= 0.9


def test_harris_offset_and_contrast():
    img = blocky(12, 80, 80, block=5)
    r = harris_response(img)
    np.testing.assert_allclose(harris_response(img + 37.0), r, atol=1e-6 * np.abs(r).max())
    # structure tensor is quadratic in contrast, its determinant quartic
    np.testing.assert_allclose(harris_response(3 * img), 81 * r, rtol=1e-9, atol=1e-9 * 81 * np.abs(r).max())
    a = [(d.x, d.y) for d in harris_detect(img, max_detections=20)]
    assert [(d.x, d.y) for d in harris_detect(2.5 * img + 10, max_detections=20)] == a


def test_harris_parameter_checks():
    with pytest.raises(ValueError):
        harris_response(np.zeros((10, 10)), sigma_d=0)
    with pytest.raises(ValueError):
        harris_response(np.zeros((10, 10)), k=0.3)


def test_random_detections():
    d = random_detections((50, 80), 30, seed=1, border=5)
    assert len(d) == 30
    assert all(5 <= p.x <= 74 and 5 <= p.y <= 44 for p in d)
    assert [p.confidence for p in d] == sorted((p.confidence for p in d), reverse=True)
    assert d == random_detections((50, 80), 30, seed=1, border=5)


# -- curves and files ------------------------------------------------------------------------------


def make_pair(scene="s", shift=(3, 2)):
    img_a = blocky(13, 120, 120)
    h = geo.Transform2D.translation(*shift)
    img_b = np.zeros_like(img_a)
    img_b[shift[1] :, shift[0] :] = img_a[: 120 - shift[1], : 120 - shift[0]]
    return ImagePair(img_a, img_b, h, scene)


def test_build_curves_single_and_duplicate():
    pair = make_pair()
    rng = np.random.default_rng(14)
    a = dets_from(np.round(rng.uniform(25, 90, size=(20, 2))))
    b = mapped(a, pair.h_ab)[:15] + dets_from(rng.uniform(0, 120, size=(5, 2)))
    one = build_curves([pair], [a], [b], [10])
    assert set(one) == {("s", "repeatability"), ("s", "matching_score")}
    assert one[("s", "repeatability")].points == [(10, 1.0)]
    single = build_curves([pair], [a], [b], [5, 10, 20])
    double = build_curves([pair, pair], [a, a], [b, b], [5, 10, 20])
    for key in single:
        assert single[key].points == pytest.approx(double[key].points)
    assert single[("s", "repeatability")].scores[-1] == pytest.approx(15 / 20)


def test_build_curves_not_monotonised():
    pair = make_pair()
    a = dets_from([(40, 40), (60, 60), (80, 80)])
    b = mapped(a[:1], pair.h_ab) + dets_from([(10, 100), (100, 10)])
    curve = build_curves([pair], [a], [b], [1, 3], metrics=("repeatability",))[("s", "repeatability")]
    assert curve.points == [(1, 1.0), (3, pytest.approx(1 / 3))]


def test_build_curves_validation():
    with pytest.raises(ValueError):
        build_curves([], [], [], [10, 5])
    with pytest.raises(ValueError):
        build_curves([make_pair()], [], [], [10])


def test_image_pair_requires_invertible():
    with pytest.raises(ValueError):
        ImagePair(np.zeros((3, 3)), np.zeros((3, 3)), geo.Transform2D([[1, 2], [2, 4]], [0, 0]))


def test_pair_list_roundtrip(tmp_path):
    pair = make_pair()
    write_pgm(tmp_path / "a.pgm", pair.img_a)
    write_pgm(tmp_path / "b.pgm", np.clip(pair.img_b, 0, 255))
    h = geo.Transform2D([[1.0, 0.25], [-0.5, 2.0]], [3.0, -1.5])
    write_pair_list(tmp_path / "pairs.txt", [("a.pgm", "b.pgm", h)])
    assert (tmp_path / "pairs.txt").read_text() == "a.pgm b.pgm 1 0.25 -0.5 2 3 -1.5\n"
    ((pa, pb, hh),) = read_pair_list(tmp_path / "pairs.txt")
    assert pa == str(tmp_path / "a.pgm") and hh.allclose(h)
    (p,) = load_pairs(tmp_path / "pairs.txt")
    assert p.scene == "a" and p.img_a.shape == (120, 120)
    (tmp_path / "bad.txt").write_text("a.pgm b.pgm 1 0 0\n")
    with pytest.raises(ValueError):
        read_pair_list(tmp_path / "bad.txt")


def test_metrics_csv(tmp_path):
    curves = {("s", "repeatability"): MetricCurve([(10, 0.5), (20, 0.25)])}
    write_metrics_csv(tmp_path / "m.csv", curves)
    assert (tmp_path / "m.csv").read_text() == "scene,metric,n,score\ns,repeatability,10,0.500000\ns,repeatability,20,0.250000\n"
