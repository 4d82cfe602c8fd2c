import numpy as np
import pytest
from hypothesis import given, strategies as st

from checks import surface_rays
from conftest import box, ring_cameras
from oracles import weights_loop
from spatialground.field import (EPS_NORM, FeatureField, SampleConfig, ScalePyramid, ViewCache, build_bundle,
                                 log_edges, query_field, render_bundle, render_depth, render_embedding,
                                 render_weights, termination_points, trilinear)
from spatialground.scene import Ray, Scene


def test_weights_examples():
    w = render_weights(np.zeros(5), np.full(5, 0.3)).weight
    assert np.all(w == 0)
    rw = render_weights([1.0, 1.0], [1.0, 1.0])
    assert np.allclose(rw.weight, [1 - np.exp(-1), np.exp(-1) * (1 - np.exp(-1))], atol=1e-15)
    assert np.allclose(rw.weight, [0.6321, 0.2325], atol=1e-4)
    w = render_weights([20.0, 3.0, 5.0], [1.0, 1.0, 1.0]).weight
    assert w[0] == pytest.approx(1, abs=1e-8) and 0.999 <= w.sum() <= 1


@given(st.lists(st.tuples(st.floats(0, 50), st.floats(1e-3, 1)), min_size=1, max_size=40))
def test_weights_match_loop_oracle(pairs):
    s, d = map(np.array, zip(*pairs))
    rw = render_weights(s, d)
    T, w, T_end = weights_loop(s, d)
    assert np.allclose(rw.transmittance, T, atol=1e-12)
    assert np.allclose(rw.weight, w, atol=1e-12)
    assert rw.weight.sum() == pytest.approx(1 - T_end, abs=1e-9)
    assert np.all(np.diff(rw.transmittance) <= 1e-15) and np.all(rw.weight >= 0)


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(K=1)
    with pytest.raises(ValueError):
        SampleConfig(near=2, far=1)


def small_field(seed=0, res=(4, 8), dim=6):
    rng = np.random.default_rng(seed)
    fld = FeatureField.zeros((-1, -1, -1), (1, 1, 1), np.array([0.05, 0.2, 1.0]), res, dim, 3)
    for g in fld.language.levels + fld.instance.levels:
        g[...] = rng.uniform(-1, 1, g.shape)
    fld.vis_mod_lang[...] = rng.uniform(-0.1, 0.1, fld.vis_mod_lang.shape)
    return fld


def test_zero_field_queries_zero():
    fld = FeatureField.zeros((-1, -1, -1), (1, 1, 1), np.array([0.1, 0.5, 1.0]), (4, 8), 5, 3)
    assert np.all(query_field(fld, "language", [0.1, 0.2, 0.3], 0.3, 40.0, [1, 0, 0]) == 0)


def test_vertex_interpolation_identity():
    fld = small_field()
    res = fld.language.resolutions[1]
    i, j, k = 2, 5, 7
    p = -1 + 2 * np.array([i, j, k]) / (res - 1)
    got = query_field(fld, "language", p, 0.1, 0.0, [0, 0, 0])
    assert np.allclose(got, fld.language.levels[1][i, j, k], atol=1e-12)
    vp = fld.visual_properties(np.array([40.0]), np.array([[0.2, 0.4, 0.6]]))
    got = query_field(fld, "language", p, 0.1, 40.0, [0.2, 0.4, 0.6])
    assert np.allclose(got, fld.language.levels[1][i, j, k] + vp[0] @ fld.vis_mod_lang.T)


@given(st.lists(st.floats(-0.99, 0.99), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_query_continuity(p, d):
    fld = small_field()
    p = np.asarray(p)
    d = np.asarray(d)
    d = d / max(np.linalg.norm(d), 1e-9) * 1e-6
    a = query_field(fld, "language", p, 0.1, 0.0, [0, 0, 0])
    b = query_field(fld, "language", p + d, 0.1, 0.0, [0, 0, 0])
    assert np.max(np.abs(a - b)) < 1e-4


def test_trilinear_partition_of_unity():
    pts = np.random.default_rng(1).uniform(-2, 2, (200, 3))
    idx, w = trilinear(np.full(3, -1.0), np.ones(3), 5, pts)
    assert np.allclose(w.sum(axis=1), 1) and np.all(w >= -1e-15) and idx.max() < 125


def test_pyramid_validation_and_levels():
    with pytest.raises(ValueError):
        ScalePyramid([np.zeros((8, 8, 8, 2)), np.zeros((4, 4, 4, 2))], np.array([0.1, 0.2, 0.3]))
    with pytest.raises(ValueError):
        ScalePyramid([np.zeros((4, 4, 4, 2)), np.zeros((8, 8, 8, 2))], np.array([0.3, 0.2, 0.1]))
    pyr = ScalePyramid([np.zeros((r, r, r, 2)) for r in (2, 4, 8)], np.array([0.1, 0.2, 0.4, 0.8]))
    assert [pyr.level_of(s) for s in (0.01, 0.15, 0.3, 0.5, 5.0)] == [2, 2, 1, 0, 0]


@given(st.lists(st.floats(1e-3, 5), min_size=2, max_size=30))
def test_log_edges_increasing(scales):
    e = log_edges(scales, 3)
    assert len(e) == 4 and np.all(np.diff(e) > 0)
    assert e[-1] >= max(scales) * 0.999


def test_miss_ray_degenerate(two_box_scene):
    fld = small_field()
    r = render_embedding(two_box_scene, fld, "language", Ray(np.array([0, 0, 5.0]), np.array([0, 0, 1.0])), 0.1)
    assert r.degenerate and np.all(r.raw == 0) and np.all(r.normalized == 0)


def test_constant_field_renders_constant():
    v = np.random.default_rng(2).normal(size=6)
    fld = small_field()
    for g in fld.language.levels:
        g[...] = v
    fld.vis_mod_lang[...] = 0
    scene = Scene([box(1, "wall", (2.0, 0, 0), (0.5, 0.8, 0.8))])
    r = render_embedding(scene, fld, "language", Ray(np.zeros(3), np.array([1.0, 0, 0])), 0.1)
    assert not r.degenerate
    assert np.allclose(r.normalized, v / np.linalg.norm(v), atol=1e-3)
    assert abs(np.linalg.norm(r.normalized) - 1) < 1e-6


def test_render_linearity(two_box_scene):
    f1, f2 = small_field(1), small_field(2)
    a, b = 0.7, -1.3
    f3 = small_field(0)
    for g3, g1, g2 in zip(f3.language.levels, f1.language.levels, f2.language.levels):
        g3[...] = a * g1 + b * g2
    f3.vis_mod_lang[...] = a * f1.vis_mod_lang + b * f2.vis_mod_lang
    cam = two_box_scene.cameras[0]
    o, d = cam.all_rays()
    bundle = build_bundle(two_box_scene, o[::7], d[::7], f1.sampling)
    r1, r2, r3 = (render_bundle(f, "language", bundle, 1) for f in (f1, f2, f3))
    assert np.allclose(r3, a * r1 + b * r2, atol=1e-9)


def test_render_depth_wall():
    scene = Scene([box(1, "wall", (2.5, 0, 0), (0.5, 1, 1))])
    s = SampleConfig()
    delta = (s.far - s.near) / s.K
    d = render_depth(scene, Ray(np.zeros(3), np.array([1.0, 0, 0])), s)
    assert 2 - delta <= d <= 2 + delta
    assert np.isinf(render_depth(scene, Ray(np.zeros(3), np.array([-1.0, 0, 0])), s))


@given(st.floats(0.0, 200.0), st.floats(1e-3, 0.5))
def test_termination_point_oracle(sigma, delta):
    # conditional mean of an exponential stopping time truncated to [0, delta], by quadrature
    x = np.linspace(0, delta, 20001)
    pdf = np.exp(-sigma * x)
    ref = np.trapezoid(x * pdf, x) / np.trapezoid(pdf, x)
    got = termination_points(1.0, delta, sigma) - (1.0 - delta / 2)
    assert got == pytest.approx(ref, abs=1e-7 + 1e-6 * delta)


def test_render_depth_agrees_with_cast_ray(two_box_scene):
    s = SampleConfig()
    delta = (s.far - s.near) / s.K
    errs = [abs(render_depth(two_box_scene, ray, s) - hit.t) for ray, hit in
            surface_rays(two_box_scene, ring_cameras(4), 1000, s)]
    assert max(errs) <= delta


def test_view_cache_matches_direct(two_box_scene):
    fld = small_field()
    cam = two_box_scene.cameras[2]
    cache = ViewCache(two_box_scene, cam, fld.sampling)
    full = cache.render(fld, "language", 0)
    o, d = cam.all_rays()
    k = 311
    direct = render_embedding(two_box_scene, fld, "language", Ray(o[k], d[k]), 0.9).raw
    assert fld.language.level_of(0.9) == 0
    assert np.allclose(full[k], direct, atol=1e-6)
    assert EPS_NORM == 1e-8
