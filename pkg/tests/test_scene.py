import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import box, ring_cameras
from oracles import slab_hit
from spatialground.scene import (SIGMA_IN, CameraView, DegenerateMaskError, MissPixelError, Pose, Primitive, Ray,
                                 RenderedView, Scene, cast_ray, deproject, masks_from_view, matrix_to_quat,
                                 occupancy, physical_scale, project, quat_to_matrix, render_view)


def unit_box(center=(0, 0, 0), pid=1):
    return box(pid, "box", center, (0.5, 0.5, 0.5), (0.1, 0.2, 0.3))


def test_occupancy_inside_and_outside():
    scene = Scene([unit_box()])
    sigma, color = occupancy(scene, [0, 0, 0])
    assert sigma == SIGMA_IN
    assert np.allclose(color, [0.1, 0.2, 0.3])
    sigma, color = occupancy(scene, [10, 10, 10])
    assert sigma == 0.0 and np.all(color == 0)


def test_occupancy_sphere_near_surface():
    s = Primitive(4, "ball", "sphere", Pose.from_yaw(0, (1, 2, 3)), np.ones(3), np.array([0.7, 0.7, 0.1]))
    scene = Scene([s])
    d = np.array([1.0, -2.0, 0.5])
    p = np.array([1, 2, 3]) + 0.999 * d / np.linalg.norm(d)
    assert occupancy(scene, p)[0] == SIGMA_IN
    assert occupancy(scene, np.array([1, 2, 3]) + 1.001 * d / np.linalg.norm(d))[0] == 0.0


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_occupancy_is_binary(p):
    scene = Scene([unit_box(), box(2, "x", (1.5, 0, 0), (0.2, 0.2, 0.2))])
    assert occupancy(scene, p)[0] in (0.0, SIGMA_IN)


def test_cast_ray_slab_example():
    scene = Scene([unit_box((3, 0, 0), pid=7)])
    hit = cast_ray(scene, Ray(np.zeros(3), np.array([1.0, 0, 0])))
    assert hit.instance_id == 7 and hit.t == pytest.approx(2.5, abs=1e-12)
    assert cast_ray(scene, Ray(np.zeros(3), np.array([-1.0, 0, 0]))) is None


def test_cast_ray_from_inside_is_zero():
    hit = cast_ray(Scene([unit_box(pid=3)]), Ray(np.zeros(3), np.array([0, 0, 1.0])))
    assert hit.t == 0.0 and hit.instance_id == 3


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_cast_ray_matches_slab_oracle(d, o):
    d = np.asarray(d) / np.linalg.norm(d)
    scene = Scene([unit_box((0.3, -0.2, 0.1))])
    hit = cast_ray(scene, Ray(np.asarray(o, float), d))
    ref = slab_hit(o, d, (-0.2, -0.7, -0.4), (0.8, 0.3, 0.6))
    if ref is None:
        assert hit is None
    else:
        assert hit is not None and hit.t == pytest.approx(ref, abs=1e-9)


def test_render_empty_scene():
    cam = ring_cameras(1)[0]
    view = render_view(Scene([]), cam)
    assert np.all(view.instance_ids == -1) and np.all(np.isinf(view.depth))


def test_render_two_disjoint_primitives(two_box_scene):
    view = render_view(two_box_scene, two_box_scene.cameras[0])
    assert set(np.unique(view.instance_ids)) == {-1, 1, 2}
    assert np.all(view.depth[view.instance_ids >= 0] > 0)


def test_render_centered_box_is_contiguous():
    cam = CameraView.look_at((0, -3, 0), (0, 0, 0), fx=40, fy=40, width=41, height=41)
    # extents chosen so no silhouette edge falls exactly on a pixel ray
    view = render_view(Scene([box(5, "box", (0, 0, 0), (0.47, 0.47, 0.47))]), cam)
    v, u = np.nonzero(view.instance_ids == 5)
    assert view.instance_ids[20, 20] == 5
    block = view.instance_ids[v.min():v.max() + 1, u.min():u.max() + 1]
    assert np.all(block == 5)


def test_masks_partition():
    ids = np.array([[-1, 3, 3], [7, 7, -1]])
    view = RenderedView(0, np.zeros((2, 3, 3)), np.ones((2, 3)), ids)
    masks = masks_from_view(view)
    assert [m.instance_id for m in masks] == [3, 7]
    assert not (masks[0].pixels & masks[1].pixels).any()
    assert np.array_equal(masks[0].pixels | masks[1].pixels, ids >= 0)
    empty = RenderedView(0, np.zeros((2, 2, 3)), np.full((2, 2), np.inf), np.full((2, 2), -1))
    assert masks_from_view(empty) == []


def test_masks_partition_rendered(two_box_scene):
    for cam in two_box_scene.cameras:
        view = render_view(two_box_scene, cam)
        masks = masks_from_view(view)
        total = np.zeros(view.instance_ids.shape, int)
        for m in masks:
            total += m.pixels
        assert np.array_equal(total, (view.instance_ids >= 0).astype(int))


def test_deproject_axis_case():
    cam = CameraView(100, 100, 50, 40, 101, 81, Pose(np.eye(3), np.zeros(3)))
    assert np.allclose(deproject(cam, (50, 40), 1.0), [0, 0, 1])
    p = deproject(cam, (150, 40), 2.0)
    assert np.allclose(p, [2 / math.sqrt(2), 0, 2 / math.sqrt(2)])
    with pytest.raises(MissPixelError):
        deproject(cam, (1, 1), np.inf)


def test_deproject_lands_on_surface(two_box_scene):
    cam = two_box_scene.cameras[1]
    view = render_view(two_box_scene, cam)
    v, u = np.nonzero(view.instance_ids == 2)
    pts = deproject(cam, np.stack([u, v], 1), view.depth[v, u])
    prim = two_box_scene.primitive(2)
    local = np.abs(prim.pose.to_local(pts))
    gap = np.min(np.abs(local - prim.extents), axis=1)
    assert np.all(np.all(local <= prim.extents + 1e-6, axis=1)) and np.all(gap < 1e-6)


@given(st.floats(0, 47), st.floats(0, 35), st.floats(0.1, 10))
def test_project_deproject_roundtrip(u, v, d):
    cam = ring_cameras(1)[0]
    assert np.allclose(project(cam, deproject(cam, (u, v), d)), [u, v], atol=1e-6)


def test_physical_scale_examples():
    corners = np.array([[x, y, z] for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5)])
    assert physical_scale(corners) == pytest.approx(math.sqrt(0.75), abs=1e-12)
    assert physical_scale(np.ones((4, 3))) == 0.0
    with pytest.raises(DegenerateMaskError):
        physical_scale(np.zeros((1, 3)))


@given(st.integers(0, 2**31), st.floats(0.01, 100), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_physical_scale_homogeneous_and_translation_invariant(seed, k, shift):
    pts = np.random.default_rng(seed).normal(size=(20, 3))
    s = physical_scale(pts)
    assert physical_scale(pts * k) == pytest.approx(k * s, rel=1e-9)
    assert physical_scale(pts + np.asarray(shift)) == pytest.approx(s, rel=1e-7, abs=1e-9)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_roundtrip(q):
    q = np.asarray(q) / np.linalg.norm(q)
    R = quat_to_matrix(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-9)


def test_invalid_primitive_and_camera():
    with pytest.raises(ValueError):
        Primitive(1, "x", "box", Pose.from_yaw(0, (0, 0, 0)), np.array([1, 0, 1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        CameraView(-1, 1, 0, 0, 4, 4, Pose(np.eye(3), np.zeros(3)))
    with pytest.raises(ValueError):
        Scene([unit_box(pid=1), unit_box(pid=1)])
