import math

import numpy as np
import pytest

from oracles import mmd2_two_samples
from texmorph.errors import DegenerateEndpointsError, InvalidInputError
from texmorph.metrics import (
    Camera,
    FeatureExtractor,
    RenderedView,
    adjacent_stats,
    evaluate_trajectory,
    feature_extract,
    fid,
    fid_frames,
    kid,
    orbit_cameras,
    ppl,
    render_view,
    render_views,
)
from texmorph.toyprior import ColoredVoxelAsset


def asset(positions, rgb, opacity=None, n=8):
    pos = np.asarray(positions, np.int64).reshape(-1, 3)
    rgb = np.asarray(rgb, np.float32).reshape(-1, 3)
    op = np.ones(pos.shape[0], np.float32) if opacity is None else np.asarray(opacity, np.float32)
    return ColoredVoxelAsset(pos, rgb, op, n)


def test_empty_asset_renders_white():
    img = render_view(asset(np.zeros((0, 3)), np.zeros((0, 3))), Camera()).rgb
    assert np.all(img == 1.0)


def test_centre_voxel_is_red_block_at_centre():
    # an odd grid has a voxel whose centre is the grid centre
    img = render_view(asset([[4, 4, 4]], [[1, 0, 0]], n=9), Camera(width=32, height=32)).rgb
    red = np.all(img == [1, 0, 0], axis=2)
    ys, xs = np.nonzero(red)
    assert red.sum() > 0
    assert abs(ys.mean() - 15.5) <= 1 and abs(xs.mean() - 15.5) <= 1
    assert np.all(img[~red] == 1.0)


def test_nearer_voxel_wins():
    # the camera at azimuth 0 looks down -z, so larger z is nearer
    far_near = asset([[4, 4, 1], [4, 4, 6]], [[0, 0, 1], [0, 1, 0]])
    near_far = asset([[4, 4, 6], [4, 4, 1]], [[0, 1, 0], [0, 0, 1]])
    for a in (far_near, near_far):
        img = render_view(a, Camera(width=32, height=32)).rgb
        assert np.any(np.all(img == [0, 1, 0], axis=2))
        assert not np.any(np.all(img == [0, 0, 1], axis=2))


def test_opacity_blends_over_white():
    img = render_view(asset([[4, 4, 4]], [[0, 0, 0]], [0.25]), Camera(width=16, height=16)).rgb
    assert np.isclose(img.min(), 0.75)


def test_render_deterministic_and_in_range(rng):
    pos = np.unique(rng.integers(0, 8, (60, 3)), axis=0)
    a = asset(pos, rng.uniform(size=(pos.shape[0], 3)), rng.uniform(size=pos.shape[0]))
    cams = orbit_cameras(4)
    x, y = render_views(a, cams), render_views(a, cams)
    assert all(p.rgb.tobytes() == q.rgb.tobytes() for p, q in zip(x, y))
    assert all(v.rgb.min() >= 0 and v.rgb.max() <= 1 for v in x)
    with pytest.raises(InvalidInputError):
        render_views(a, [])


def test_orbit_cameras():
    cams = orbit_cameras(16)
    assert [c.azimuth for c in cams[:3]] == [0.0, 22.5, 45.0]
    assert all(c.elevation == 20.0 for c in cams)


def test_flatten_pixel_order():
    img = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 12
    feats = feature_extract([RenderedView(img, Camera(width=2, height=2))], FeatureExtractor("flatten"))
    assert feats.shape == (1, 12)
    assert np.array_equal(feats[0], img.reshape(-1))


def test_projection_shapes_and_determinism(rng):
    views = [RenderedView(rng.uniform(size=(8, 8, 3)).astype(np.float32), Camera()) for _ in range(3)]
    for _ in range(5):
        ex = FeatureExtractor("projection", int(rng.integers(1, 4)), int(rng.integers(4, 32)),
                              int(rng.integers(1, 20)), int(rng.integers(0, 99)))
        f = feature_extract(views, ex)
        assert f.shape == (3, ex.dim)
        assert f.tobytes() == feature_extract(views, ex).tobytes()


def test_extractor_parse_round_trip():
    ex = FeatureExtractor("projection", 3, 10, 5, 7)
    assert FeatureExtractor.parse(ex.describe()) == ex
    assert FeatureExtractor.parse("flatten").kind == "flatten"
    assert FeatureExtractor.parse("projection:dim=4").dim == 4
    for bad in ("flatten:x=1", "inception", "projection:depth"):
        with pytest.raises(InvalidInputError):
            FeatureExtractor.parse(bad)


def test_fid_self_and_symmetry(rng):
    a, b = rng.normal(size=(40, 5)), rng.normal(1, 2, size=(30, 5))
    assert abs(fid(a, a)) < 1e-6
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_one_dimensional_mean_shift(rng):
    x = rng.normal(size=200)
    assert abs(fid(x, x + 3.0) - 9.0) < 1e-6


def test_fid_diagonal_closed_form(rng):
    base = rng.normal(size=(500, 4))
    base = (base - base.mean(0)) / base.std(0, ddof=1)
    # decorrelate exactly so the sample covariance is diagonal
    q, _ = np.linalg.qr(base - base.mean(0))
    white = q * np.sqrt(base.shape[0] - 1)
    mu_a, mu_b = np.array([0.0, 1, 2, 3]), np.array([1.0, -1, 0.5, 3])
    sd_a, sd_b = np.array([1.0, 2, 0.5, 1]), np.array([2.0, 1, 0.5, 3])
    a, b = white * sd_a + mu_a, white * sd_b + mu_b
    want = np.sum((mu_a - mu_b) ** 2) + np.sum((sd_a - sd_b) ** 2)
    assert abs(fid(a, b) - want) < 1e-4


def test_fid_requires_two_samples():
    with pytest.raises(InvalidInputError):
        fid(np.ones((1, 3)), np.ones((4, 3)))


def test_kid_two_samples_hand_expansion(rng):
    x, y = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    assert abs(kid(x, y) - mmd2_two_samples(x.tolist(), y.tolist())) < 1e-8


def test_kid_unbiased_on_identical_distributions():
    est = []
    for s in range(20):
        r = np.random.default_rng(s)
        est.append(kid(r.normal(size=(50, 4)), r.normal(size=(50, 4))))
    est = np.array(est)
    assert est.mean() <= 1e-6 + 3 * est.std(ddof=1) / math.sqrt(len(est))
    assert abs(est.mean()) < 3 * est.std(ddof=1) / math.sqrt(len(est))


def test_kid_grows_with_separation(rng):
    a = rng.normal(size=(40, 3))
    vals = [kid(a, rng.normal(size=(40, 3)) + s) for s in (2.0, 4.0, 8.0)]
    assert vals[0] > 0 and vals[0] < vals[1] < vals[2]


def test_kid_requires_two_samples():
    with pytest.raises(InvalidInputError):
        kid(np.ones((1, 2)), np.ones((3, 2)))


def test_ppl_cases(rng):
    f = rng.normal(size=(2, 5))
    assert ppl(f) == 1.0
    line = np.outer(np.linspace(0, 1, 7), rng.normal(size=4)) + rng.normal(size=4)
    assert abs(ppl(line) - 1.0) < 1e-6
    walk = rng.normal(size=(6, 3))
    assert ppl(walk) >= 1 - 1e-6
    assert abs(ppl(walk) - ppl(walk * 7.5)) < 1e-9
    assert ppl(walk, "angular") >= 1 - 1e-6
    with pytest.raises(DegenerateEndpointsError):
        ppl(np.array([[1.0, 2.0], [3.0, 4.0], [1.0, 2.0]]))
    with pytest.raises(InvalidInputError):
        ppl(walk, "manhattan")


def test_adjacent_stats_cases(rng):
    assert adjacent_stats(np.ones((4, 3))) == pytest.approx((0.0, 1.0))
    assert adjacent_stats(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx((2.0, -1.0))
    f = rng.normal(size=(5, 4))
    d = [math.dist(f[i], f[i + 1]) for i in range(4)]
    c = [float(np.dot(f[i], f[i + 1])) / (np.linalg.norm(f[i]) * np.linalg.norm(f[i + 1])) for i in range(4)]
    got = adjacent_stats(f)
    assert abs(got.mean_distance - sum(d) / 4) < 1e-6 and abs(got.mean_cosine - sum(c) / 4) < 1e-6
    multi = rng.normal(size=(5, 3, 4))
    per_view = [adjacent_stats(multi[:, v]) for v in range(3)]
    assert adjacent_stats(multi).mean_distance == pytest.approx(np.mean([p.mean_distance for p in per_view]))
    with pytest.raises(InvalidInputError):
        adjacent_stats(np.ones((1, 3)))


def test_fid_frames():
    assert fid_frames(5) == (1, 3)
    assert fid_frames(7) == (2, 4)
    assert fid_frames(2) == (0, 1)


def test_evaluate_trajectory_all_finite(rng):
    frames = []
    for i in range(4):
        pos = np.unique(rng.integers(0, 8, (40, 3)), axis=0)
        frames.append(asset(pos, rng.uniform(size=(pos.shape[0], 3))))
    values = evaluate_trajectory(frames, 4, FeatureExtractor(dim=4))
    assert set(values) == {"fid", "kid", "ppl", "adjacent_distance", "adjacent_cosine"}
    assert all(np.isfinite(v) for v in values.values())
    same = [frames[0], frames[1], frames[0]]
    with pytest.raises(DegenerateEndpointsError):
        evaluate_trajectory(same, 2)
    assert np.isnan(evaluate_trajectory(same, 2, strict=False)["ppl"])
