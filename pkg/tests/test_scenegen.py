import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatialground.parse import Relation, parse_query
from spatialground.relations import Box, check_relation
from spatialground.scene import render_view
from spatialground.scenegen import (GenConfig, GenerationError, RelationConstraint, generate_scene, random_gen_config,
                                    read_scene_dir, scene_from_json, scene_to_json, write_scene_dir)


def gt_box(scene, pid):
    return Box(*scene.primitive(pid).aabb())


def assert_json_close(a, b):
    # quaternions are renormalized on load, so floats may move by an ulp
    if isinstance(a, dict):
        assert a.keys() == b.keys()
        for k in a:
            assert_json_close(a[k], b[k])
    elif isinstance(a, list):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert_json_close(x, y)
    elif isinstance(a, (int, float)) and not isinstance(a, bool):
        assert a == pytest.approx(b, abs=1e-12)
    else:
        assert a == b


def small(cons, **kw):
    return GenConfig(cons, width=64, height=48, focal=60, **kw)


def test_support_constraint_holds():
    scene = generate_scene(small([RelationConstraint("Support/SupportedBy", "book", "chair")]), 3)
    [a] = scene.annotations
    assert scene.category_of(a.target_id) == "book" and scene.category_of(a.anchor_id) == "chair"
    assert check_relation(gt_box(scene, a.target_id), gt_box(scene, a.anchor_id), Relation.parse(a.relation))
    books = [p for p in scene.primitives if p.category == "book"]
    assert len(books) == 2
    other = next(p for p in books if p.id != a.target_id)
    assert not check_relation(Box(*other.aabb()), gt_box(scene, a.anchor_id), Relation.parse(a.relation))


def test_deterministic():
    cfg = random_gen_config(5)
    a, b = generate_scene(cfg, 5), generate_scene(random_gen_config(5), 5)
    assert json.dumps(scene_to_json(a)) == json.dumps(scene_to_json(b))
    assert [x.text for x in a.annotations] == [x.text for x in b.annotations]


def test_counts():
    scene = generate_scene(small([RelationConstraint("HorizontalProximity/Near", "mug", "lamp")],
                                 counts={"mug": 3, "book": 2}), 1)
    cats = [p.category for p in scene.primitives]
    assert cats.count("book") == 2 and cats.count("mug") == 3


@settings(max_examples=6)
@given(st.integers(0, 10_000))
def test_random_configs_satisfy_all_classes(seed):
    scene = generate_scene(random_gen_config(seed), seed)
    frame = scene.cameras[0]
    assert {a.relation.split("/")[0] for a in scene.annotations} == {
        "Support", "VerticalProximity", "HorizontalProximity", "Allocentric"}
    for a in scene.annotations:
        rel = Relation.parse(a.relation)
        cat = scene.category_of(a.target_id)
        same = [Box(*p.aabb()) for p in scene.primitives if p.category == cat and p.id != a.target_id]
        assert len(same) >= 1
        assert check_relation(gt_box(scene, a.target_id), gt_box(scene, a.anchor_id), rel, frame, same)
        ins = parse_query(a.text)
        assert (ins.target, ins.anchor, str(ins.relation)) == (cat, scene.category_of(a.anchor_id), a.relation)
    boxes = [Box(*p.aabb()) for p in scene.primitives if p.category != "floor"]
    for i, b in enumerate(boxes):
        for c in boxes[i + 1:]:
            overlap = np.minimum(b.hi, c.hi) - np.maximum(b.lo, c.lo)
            assert np.any(overlap <= 1e-9)
    for a in scene.annotations:
        seen = sum((render_view(scene, cam).instance_ids == a.target_id).sum() >= 25 for cam in scene.cameras)
        assert seen >= 2


def test_unsatisfiable_and_malformed():
    with pytest.raises(GenerationError):
        generate_scene(small([RelationConstraint("Support/SupportedBy", "book", "chair"),
                              RelationConstraint("HorizontalProximity/Near", "mug", "chair")]), 0)
    with pytest.raises(GenerationError):
        generate_scene(small([RelationConstraint("Support/SupportedBy", "book", "chair")], counts={"book": 1}), 0)
    with pytest.raises(ValueError):
        GenConfig([])
    with pytest.raises(ValueError):
        GenConfig([RelationConstraint("Support/Sideways", "book", "chair")])


def test_scene_dir_roundtrip(tmp_path):
    scene = generate_scene(small([RelationConstraint("Allocentric/Left", "mug", "lamp"),
                                  RelationConstraint("VerticalProximity/Below", "box", "table")]), 2)
    write_scene_dir(scene, tmp_path)
    back = read_scene_dir(tmp_path)
    assert_json_close(scene_to_json(back), scene_to_json(scene))
    assert [a.text for a in back.annotations] == [a.text for a in scene.annotations]
    assert len(json.loads((tmp_path / "queries.json").read_text())) >= 2
    d = json.loads((tmp_path / "scene.json").read_text())
    assert set(d) == {"units", "primitives", "cameras", "annotations"}
    assert set(d["primitives"][0]) == {"id", "category", "shape", "pose", "extents", "albedo"}
    assert set(d["cameras"][0]) == {"view_id", "fx", "fy", "cx", "cy", "w", "h", "pose"}
    assert_json_close(scene_to_json(scene_from_json(d)), d)
