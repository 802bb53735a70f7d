#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)

场景几何测试

覆盖房间包围盒的三条构建规则、物体包围盒、实例编号、场景构建与JSON读写。
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from memsim.errors import InputError
from memsim.file_formats import dumps_json, load_json
from memsim.scene_model import (Aabb, LabeledSurfaces, ObjectInstance, ObjectRef, Room,
                                RoomSurfaces, SurfaceObject, Vec3, add_object,
                                assign_instance_ids,
                                build_object_aabb, build_room_aabb, build_scene,
                                collect_floor_elevations, load_scene, load_surfaces,
                                render_room_listing, scene_from_json, scene_to_json)

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                        'input', 'fixtures')


def box(lo, hi) -> Aabb:
    return Aabb(Vec3(*lo), Vec3(*hi))


def surfaces(**rooms) -> LabeledSurfaces:
    built = {}
    for key, (floor, ceiling) in rooms.items():
        room_id = int(key[1:])
        built[room_id] = RoomSurfaces(
            room_id,
            floor=None if floor is None else np.asarray(floor, dtype=float),
            ceiling=None if ceiling is None else np.asarray(ceiling, dtype=float))
    return LabeledSurfaces(built)


# ---------------------------------------------------------------------------
# build_room_aabb
# ---------------------------------------------------------------------------

def test_room_with_floor_and_ceiling():
    s = surfaces(r0=([[0, 0.0, 0], [4, 0.1, 4]], [[0, 2.4, 0], [4, 2.5, 4]]))
    aabb = build_room_aabb(s, 0, collect_floor_elevations(s))
    assert (aabb.min.y, aabb.max.y) == (0.0, 2.5)
    assert (aabb.min.x, aabb.max.x, aabb.min.z, aabb.max.z) == (0.0, 4.0, 0.0, 4.0)


def test_missing_floor_uses_highest_global_below_ceiling():
    s = surfaces(r1=(None, [[0, 2.4, 0], [3, 2.5, 3]]))
    aabb = build_room_aabb(s, 1, (0.0, 3.0))
    assert aabb.min.y == 0.0
    assert aabb.max.y == 2.5


def test_missing_floor_without_usable_global_falls_back_to_ceiling_min():
    s = surfaces(r1=(None, [[0, 2.4, 0], [3, 2.5, 3]]))
    aabb = build_room_aabb(s, 1, (3.0,))
    assert (aabb.min.y, aabb.max.y) == (2.4, 2.5)


def test_missing_ceiling_uses_cloud_top():
    s = surfaces(r0=([[0, 0.0, 0], [2, 0.1, 2]], None))
    aabb = build_room_aabb(s, 0, collect_floor_elevations(s))
    assert (aabb.min.y, aabb.max.y) == (0.0, 0.1)


def test_room_without_vertical_evidence_is_discarded():
    s = surfaces(r2=(None, None))
    assert build_room_aabb(s, 2, (0.0,)) is None


def test_room_uses_only_own_points():
    s = surfaces(r0=([[0, 0.0, 0], [4, 0.0, 4]], [[0, 2.5, 0], [4, 2.5, 4]]),
                 r1=(None, [[10, 3.0, 0], [12, 3.0, 2]]))
    aabb = build_room_aabb(s, 1, collect_floor_elevations(s))
    assert (aabb.min.x, aabb.max.x) == (10.0, 12.0)
    assert aabb.min.y == 0.0


def test_floor_elevations_merge_within_tolerance():
    s = surfaces(r0=([[0, 0.0, 0]], None), r1=([[0, 0.00005, 0]], None),
                 r2=([[0, 3.0, 0]], None))
    assert collect_floor_elevations(s) == (0.0, 3.0)


def test_empty_point_set_is_rejected():
    s = LabeledSurfaces({0: RoomSurfaces(0, floor=np.zeros((0, 3)), ceiling=None)})
    with pytest.raises(InputError):
        build_room_aabb(s, 0, ())


# ---------------------------------------------------------------------------
# build_object_aabb
# ---------------------------------------------------------------------------

def test_object_aabb_single_point():
    aabb = build_object_aabb([[0, 0, 0]])
    assert aabb == box((0, 0, 0), (0, 0, 0))


def test_object_aabb_componentwise_envelope():
    aabb = build_object_aabb([[1, 2, 3], [-1, 0, 5]])
    assert aabb == box((-1, 0, 3), (1, 2, 5))


def test_object_aabb_matches_linear_scan():
    rng = np.random.default_rng(11)
    points = rng.uniform(-5, 5, size=(50, 3))
    lo = [min(p[axis] for p in points) for axis in range(3)]
    hi = [max(p[axis] for p in points) for axis in range(3)]
    aabb = build_object_aabb(points)
    assert aabb.min.to_list() == lo
    assert aabb.max.to_list() == hi


def test_object_aabb_requires_vertices():
    with pytest.raises(InputError):
        build_object_aabb(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# 实例编号
# ---------------------------------------------------------------------------

def _room(*objects) -> Room:
    return Room(0, box((-5, -5, -5), (5, 5, 5)), tuple(objects))


def _obj(name, oid, center, nested_in=None) -> ObjectInstance:
    return ObjectInstance(name, oid, box(center, center), home_room=0,
                          nested_in=nested_in)


def test_nearer_instance_gets_id_zero():
    room = assign_instance_ids(_room(_obj('sofa', 0, (2.0, 0.0, 0.0)),
                                     _obj('sofa', 1, (1.0, 0.0, 0.0))))
    assert room.find(ObjectRef('sofa', 0)).aabb.center == Vec3(1.0, 0.0, 0.0)
    assert room.find(ObjectRef('sofa', 1)).aabb.center == Vec3(2.0, 0.0, 0.0)


def test_equidistant_instances_ordered_by_center_coordinates():
    room = assign_instance_ids(_room(_obj('chair', 0, (1.0, 0.0, 0.0)),
                                     _obj('chair', 1, (0.0, 0.0, 1.0))))
    assert room.find(ObjectRef('chair', 0)).aabb.center == Vec3(0.0, 0.0, 1.0)
    again = assign_instance_ids(room)
    assert again == room


def test_nesting_links_follow_renumbering():
    room = assign_instance_ids(_room(
        _obj('table', 0, (3.0, 0.0, 0.0)),
        _obj('table', 1, (1.0, 0.0, 0.0)),
        _obj('cup', 0, (3.0, 1.0, 0.0), nested_in=ObjectRef('table', 0))))
    cup = room.find(ObjectRef('cup', 0))
    assert cup.nested_in == ObjectRef('table', 1)
    assert room.find(ObjectRef('table', 1)).nested_children == (ObjectRef('cup', 0),)


def test_ids_are_a_bijection_per_name():
    rng = np.random.default_rng(3)
    objects = [_obj('box', i, tuple(rng.uniform(-4, 4, 3))) for i in range(6)]
    room = assign_instance_ids(_room(*objects))
    assert sorted(o.id for o in room.contents) == list(range(6))


def test_added_object_takes_next_free_id():
    room = assign_instance_ids(_room(_obj('lamp', 0, (1.0, 0.0, 0.0))))
    room = add_object(room, 'lamp', box((4.0, 0.0, 0.0), (4.2, 1.0, 0.2)))
    assert room.find(ObjectRef('lamp', 0)).aabb.center == Vec3(1.0, 0.0, 0.0)
    assert room.find(ObjectRef('lamp', 1)) is not None


def test_nesting_cycle_is_rejected():
    with pytest.raises(InputError):
        assign_instance_ids(_room(
            _obj('a', 0, (1.0, 0.0, 0.0), nested_in=ObjectRef('b', 0)),
            _obj('b', 0, (2.0, 0.0, 0.0), nested_in=ObjectRef('a', 0))))


# ---------------------------------------------------------------------------
# 场景构建与读写
# ---------------------------------------------------------------------------

def test_build_scene_from_surfaces_fixture():
    scene, discarded = build_scene(load_surfaces(os.path.join(FIXTURES, 'surfaces_small.json')))
    assert discarded == [2]
    assert scene.room_ids == [0, 1]
    assert scene.global_floor_elevations == (0.0,)
    assert scene.rooms[1].aabb == box((4.0, 0.0, 0.0), (8.0, 2.5, 4.0))

    room = scene.rooms[0]
    assert room.find(ObjectRef('sofa', 0)).aabb.center == Vec3(1.0, 0.4, 0.75)
    assert room.find(ObjectRef('cushion', 0)).nested_in == ObjectRef('sofa', 1)


def test_build_scene_drops_objects_outside_room():
    s = LabeledSurfaces({0: RoomSurfaces(
        0, floor=np.array([[0, 0, 0], [2, 0, 2]], dtype=float),
        ceiling=np.array([[0, 2, 0], [2, 2, 2]], dtype=float),
        objects=(
            SurfaceObject('chair', np.array([[0.5, 0, 0.5], [1.0, 0.8, 1.0]])),
            SurfaceObject('chair', np.array([[5.0, 0, 5.0], [6.0, 0.8, 6.0]])),
        ))})
    scene, _ = build_scene(s)
    assert [str(o.ref) for o in scene.rooms[0].contents] == ['chair(0)']


def test_scene_json_is_stable():
    path = os.path.join(FIXTURES, 'desk_scene.json')
    scene = load_scene(path)
    doc = scene_to_json(scene)
    assert dumps_json(scene_to_json(scene_from_json(doc))) == dumps_json(doc)


def test_rebuilt_scene_is_fixpoint():
    scene, _ = build_scene(load_surfaces(os.path.join(FIXTURES, 'surfaces_small.json')))
    doc = scene_to_json(scene)
    assert scene_from_json(doc) == scene


def test_scene_rejects_object_outside_room():
    doc = load_json(os.path.join(FIXTURES, 'stirfry_scene.json'))
    doc['rooms'][0]['objects'][0]['aabb'] = {'min': [90.0, 0.0, 0.0], 'max': [91.0, 1.0, 1.0]}
    with pytest.raises(InputError):
        scene_from_json(doc)


def test_scene_rejects_unknown_nesting_target():
    doc = load_json(os.path.join(FIXTURES, 'stirfry_scene.json'))
    doc['rooms'][0]['objects'][0]['nested_in'] = 'shelf(3)'
    with pytest.raises(InputError) as info:
        scene_from_json(doc)
    assert info.value.position == 'rooms[0]'


def test_room_listing_format():
    scene = load_scene(os.path.join(FIXTURES, 'stirfry_scene.json'))
    lines = render_room_listing(scene.rooms[5])
    assert lines[0] == '"apron(0)": [21.00, 0.75, 1.50],[21.40, 0.80, 1.90]'
    assert len(lines) == 3


def test_object_ref_parse():
    assert ObjectRef.parse('flower vase(0)') == ObjectRef('flower vase', 0)
    with pytest.raises(InputError):
        ObjectRef.parse('vase')


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-q']))
