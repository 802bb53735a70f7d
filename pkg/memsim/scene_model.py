#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
场景几何模型

由带语义标签的表面点集（地板、天花板、物体顶点）构建房间与物体的轴对齐包围盒（AABB），
并按"距原点最近者为 (0)"的规则为每个房间内的同名物体分配编号。

约定：
- 竖直方向为 +y，单位为米
- 同一房间内 (name, id) 唯一，不同房间的编号互相独立
- 场景构建完成后不可变
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .file_formats import PathLike, as_matrix, load_json

logger = logging.getLogger('memsim.scene_model')

# 物体中心落在房间内的容差（米）
ROOM_EPSILON = 1e-6
# 全局地板高程去重的合并容差（米）
FLOOR_MERGE_TOLERANCE = 1e-4
# 保留的支撑面名称，"on floor(0)" 总是指房间地板
FLOOR_NAME = 'floor'

# 物体名称的规范形式：字母数字开头，单词间恰好一个空格，无首尾空白
OBJECT_NAME_PATTERN = re.compile(r'[A-Za-z0-9][A-Za-z0-9\-]*(?: [A-Za-z0-9\-]+)*')
_REF_PATTERN = re.compile(r'^\s*(?P<name>[^()]+?)\s*\(\s*(?P<id>\d+)\s*\)\s*$')


@dataclass(frozen=True, order=True)
class Vec3:
    """三维点（米）"""
    x: float
    y: float
    z: float

    def __post_init__(self):
        for axis in ('x', 'y', 'z'):
            value = float(getattr(self, axis))
            if not math.isfinite(value):
                raise InputError(f"坐标分量 {axis} 不是有限数: {value}")
            object.__setattr__(self, axis, value)

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Vec3":
        if len(values) != 3:
            raise InputError(f"三维坐标应有 3 个分量，实际 {len(values)}")
        return cls(values[0], values[1], values[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def to_list(self) -> List[float]:
        return [self.x, self.y, self.z]

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True)
class Aabb:
    """轴对齐包围盒 [min, max]"""
    min: Vec3
    max: Vec3

    def __post_init__(self):
        if (self.min.x > self.max.x or self.min.y > self.max.y
                or self.min.z > self.max.z):
            raise InputError(
                f"包围盒下角点必须逐分量不大于上角点: {self.min.to_list()} / {self.max.to_list()}")

    @classmethod
    def from_arrays(cls, lo: np.ndarray, hi: np.ndarray) -> "Aabb":
        return cls(Vec3.from_seq(lo.tolist()), Vec3.from_seq(hi.tolist()))

    @property
    def center(self) -> Vec3:
        return Vec3((self.min.x + self.max.x) * 0.5,
                    (self.min.y + self.max.y) * 0.5,
                    (self.min.z + self.max.z) * 0.5)

    @property
    def size(self) -> Vec3:
        return Vec3(self.max.x - self.min.x, self.max.y - self.min.y,
                    self.max.z - self.min.z)

    def contains_point(self, p: Vec3, tol: float = ROOM_EPSILON) -> bool:
        return (self.min.x - tol <= p.x <= self.max.x + tol
                and self.min.y - tol <= p.y <= self.max.y + tol
                and self.min.z - tol <= p.z <= self.max.z + tol)

    def translated(self, dx: float, dy: float, dz: float) -> "Aabb":
        return Aabb(Vec3(self.min.x + dx, self.min.y + dy, self.min.z + dz),
                    Vec3(self.max.x + dx, self.max.y + dy, self.max.z + dz))

    def to_json(self) -> Dict[str, List[float]]:
        return {'min': self.min.to_list(), 'max': self.max.to_list()}

    @classmethod
    def from_json(cls, doc) -> "Aabb":
        if not isinstance(doc, dict) or 'min' not in doc or 'max' not in doc:
            raise InputError("包围盒必须包含 min 与 max")
        return cls(Vec3.from_seq(doc['min']), Vec3.from_seq(doc['max']))


@dataclass(frozen=True, order=True)
class ObjectRef:
    """物体标识 name(id)，编号在每个房间内独立"""
    name: str
    id: int

    def __post_init__(self):
        if not isinstance(self.name, str) or not OBJECT_NAME_PATTERN.fullmatch(self.name):
            raise InputError(f"非法的物体名称: {self.name!r}")
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 0:
            raise InputError(f"物体编号必须是非负整数: {self.id!r}")

    def __str__(self) -> str:
        return f"{self.name}({self.id})"

    @property
    def is_floor(self) -> bool:
        return self.name == FLOOR_NAME

    @classmethod
    def parse(cls, text: str) -> "ObjectRef":
        """解析 "name(id)" 形式的文本"""
        match = _REF_PATTERN.match(text or '')
        if not match:
            raise InputError(f"物体引用格式应为 name(id): {text!r}")
        return cls(' '.join(match.group('name').split()), int(match.group('id')))


@dataclass(frozen=True)
class ObjectInstance:
    """场景中的物体实例"""
    name: str
    id: int
    aabb: Aabb
    home_room: int
    movable: bool = True
    nested_in: Optional[ObjectRef] = None
    nested_children: Tuple[ObjectRef, ...] = ()

    @property
    def ref(self) -> ObjectRef:
        return ObjectRef(self.name, self.id)


@dataclass(frozen=True)
class Room:
    """房间：编号、包围盒与所含物体"""
    id: int
    aabb: Aabb
    contents: Tuple[ObjectInstance, ...] = ()

    def __post_init__(self):
        seen = set()
        for obj in self.contents:
            if obj.ref in seen:
                raise InputError(f"房间 {self.id} 中物体 {obj.ref} 重复")
            seen.add(obj.ref)

    def find(self, ref: ObjectRef) -> Optional[ObjectInstance]:
        for obj in self.contents:
            if obj.ref == ref:
                return obj
        return None

    def check_containment(self, tol: float = ROOM_EPSILON) -> List[ObjectRef]:
        """返回中心点不在房间包围盒内的物体"""
        return [obj.ref for obj in self.contents
                if not self.aabb.contains_point(obj.aabb.center, tol)]


@dataclass(frozen=True)
class Scene:
    """场景：房间映射与全局地板高程"""
    rooms: Dict[int, Room]
    global_floor_elevations: Tuple[float, ...] = ()

    def __post_init__(self):
        for room_id, room in self.rooms.items():
            if room_id != room.id:
                raise InputError(f"房间编号不一致: {room_id} / {room.id}")

    def room(self, room_id: int) -> Optional[Room]:
        return self.rooms.get(room_id)

    @property
    def room_ids(self) -> List[int]:
        return sorted(self.rooms)

    def fingerprint(self) -> Tuple:
        """用于判断两个状态是否来自同一场景"""
        return tuple((rid, tuple(sorted(str(o.ref) for o in self.rooms[rid].contents)))
                     for rid in self.room_ids)


@dataclass(frozen=True)
class SurfaceObject:
    """标注表面中的一个物体：名称与顶点集合"""
    name: str
    vertices: np.ndarray
    movable: bool = True
    key: Optional[str] = None
    nested_in: Optional[str] = None


@dataclass(frozen=True)
class RoomSurfaces:
    """单个房间的地板、天花板点集与物体顶点"""
    room_id: int
    floor: Optional[np.ndarray] = None
    ceiling: Optional[np.ndarray] = None
    objects: Tuple[SurfaceObject, ...] = ()


@dataclass(frozen=True)
class LabeledSurfaces:
    """全场景的带标签表面点集"""
    rooms: Dict[int, RoomSurfaces] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# 包围盒构建
# ---------------------------------------------------------------------------

def _points(points, what: str) -> np.ndarray:
    if points is None:
        raise InputError(f"{what} 点集不存在")
    matrix = as_matrix(points, what, columns=3)
    if matrix.shape[0] == 0:
        raise InputError(f"{what} 点集为空")
    return matrix


def _merge_elevations(values: Iterable[float],
                      tol: float = FLOOR_MERGE_TOLERANCE) -> Tuple[float, ...]:
    merged: List[float] = []
    for value in sorted(values):
        if merged and value - merged[-1] <= tol:
            continue
        merged.append(float(value))
    return tuple(merged)


def collect_floor_elevations(surfaces: LabeledSurfaces) -> Tuple[float, ...]:
    """汇总全场景所有地板表面的最低高度，作为候选地板高程（升序、去重）"""
    minima = []
    for room_id in sorted(surfaces.rooms):
        floor = surfaces.rooms[room_id].floor
        if floor is not None:
            minima.append(float(np.min(_points(floor, f"房间 {room_id} 地板")[:, 1])))
    return _merge_elevations(minima)


def build_room_aabb(surfaces: LabeledSurfaces, room: int,
                    globals_: Sequence[float]) -> Optional[Aabb]:
    """由地板和天花板点集构建房间包围盒

    规则：
    - 地板与天花板都存在：竖直范围为 [地板最低点, 天花板最高点]
    - 缺地板：下界取低于天花板最高点的最高全局地板高程
    - 缺天花板：上界取现有点云的最高点
    - 两者都缺：返回 None（丢弃该房间）
    水平范围取地板与天花板点的 x、z 最小最大值。

    Args:
        surfaces: 全场景标注表面
        room: 房间编号
        globals_: collect_floor_elevations 的结果

    Returns:
        房间包围盒，或 None 表示丢弃
    """
    if room not in surfaces.rooms:
        raise InputError(f"标注表面中没有房间 {room}")
    entry = surfaces.rooms[room]
    floor = None if entry.floor is None else _points(entry.floor, f"房间 {room} 地板")
    ceiling = None if entry.ceiling is None else _points(entry.ceiling, f"房间 {room} 天花板")

    if floor is None and ceiling is None:
        return None

    cloud = np.vstack([p for p in (floor, ceiling) if p is not None])

    if floor is not None and ceiling is not None:
        y_lo = float(np.min(floor[:, 1]))
        y_hi = float(np.max(ceiling[:, 1]))
    elif floor is None:
        y_hi = float(np.max(ceiling[:, 1]))
        below = [e for e in globals_ if e < y_hi]
        if below:
            y_lo = float(max(below))
        else:
            # 没有低于天花板的全局高程时退回天花板点云自身的最低点
            y_lo = float(np.min(ceiling[:, 1]))
            logger.warning(f"房间 {room} 缺少地板且无可用全局地板高程，下界取天花板最低点 {y_lo}")
    else:
        y_lo = float(np.min(floor[:, 1]))
        y_hi = float(np.max(cloud[:, 1]))

    lo = np.array([np.min(cloud[:, 0]), y_lo, np.min(cloud[:, 2])])
    hi = np.array([np.max(cloud[:, 0]), y_hi, np.max(cloud[:, 2])])
    return Aabb.from_arrays(lo, hi)


def build_object_aabb(vertices) -> Aabb:
    """物体顶点的逐分量最小/最大包络"""
    points = _points(vertices, "物体顶点")
    return Aabb.from_arrays(points.min(axis=0), points.max(axis=0))


def _center_key(obj: ObjectInstance) -> Tuple[float, float, float, float]:
    c = obj.aabb.center
    return (c.norm(), c.x, c.y, c.z)


def assign_instance_ids(room: Room) -> Room:
    """按包围盒中心到原点的距离为同名物体重新编号 0,1,...

    距离相同时按中心坐标 (x, y, z) 字典序；仍相同时保持原编号顺序。
    嵌套链接随编号一起重映射。
    """
    by_name: Dict[str, List[ObjectInstance]] = {}
    for obj in room.contents:
        by_name.setdefault(obj.name, []).append(obj)

    remap: Dict[ObjectRef, ObjectRef] = {}
    for name, group in by_name.items():
        ordered = sorted(group, key=lambda o: (_center_key(o), o.id))
        for new_id, obj in enumerate(ordered):
            remap[obj.ref] = ObjectRef(name, new_id)

    renamed = []
    for obj in room.contents:
        new_ref = remap[obj.ref]
        parent = None
        if obj.nested_in is not None:
            parent = remap.get(obj.nested_in)
            if parent is None:
                raise InputError(f"房间 {room.id} 中 {obj.ref} 的嵌套目标 {obj.nested_in} 不存在")
        renamed.append(replace(obj, id=new_ref.id, nested_in=parent))

    renamed.sort(key=lambda o: (o.name, o.id))
    return Room(room.id, room.aabb, _link_children(room.id, renamed))


def _link_children(room_id: int, objects: List[ObjectInstance]) -> Tuple[ObjectInstance, ...]:
    """根据 nested_in 计算 nested_children，并检查嵌套无环"""
    refs = {o.ref for o in objects}
    children: Dict[ObjectRef, List[ObjectRef]] = {}
    parent_of: Dict[ObjectRef, ObjectRef] = {}
    for obj in objects:
        if obj.nested_in is None:
            continue
        if obj.nested_in not in refs:
            raise InputError(f"房间 {room_id} 中 {obj.ref} 的嵌套目标 {obj.nested_in} 不存在")
        children.setdefault(obj.nested_in, []).append(obj.ref)
        parent_of[obj.ref] = obj.nested_in

    for start in parent_of:
        seen = {start}
        node = parent_of.get(start)
        while node is not None:
            if node in seen:
                raise InputError(f"房间 {room_id} 中的嵌套关系存在环: {start}")
            seen.add(node)
            node = parent_of.get(node)

    return tuple(replace(o, nested_children=tuple(sorted(children.get(o.ref, ()))))
                 for o in objects)


def add_object(room: Room, name: str, aabb: Aabb, movable: bool = True,
               nested_in: Optional[ObjectRef] = None) -> Room:
    """向房间追加新物体，使用该名称的下一个空闲编号，已有物体不重新编号"""
    used = {o.id for o in room.contents if o.name == name}
    new_id = 0
    while new_id in used:
        new_id += 1
    obj = ObjectInstance(name=name, id=new_id, aabb=aabb, home_room=room.id,
                         movable=movable, nested_in=nested_in)
    if not room.aabb.contains_point(aabb.center):
        raise InputError(f"新物体 {name}({new_id}) 的中心不在房间 {room.id} 内")
    contents = [replace(o, nested_children=()) for o in room.contents] + [obj]
    return Room(room.id, room.aabb, _link_children(room.id, contents))


def build_scene(surfaces: LabeledSurfaces) -> Tuple[Scene, List[int]]:
    """由标注表面构建完整场景

    Returns:
        (场景, 被丢弃的房间编号列表)
    """
    globals_ = collect_floor_elevations(surfaces)
    logger.debug(f"全局地板高程: {list(globals_)}")

    rooms: Dict[int, Room] = {}
    discarded: List[int] = []
    for room_id in sorted(surfaces.rooms):
        aabb = build_room_aabb(surfaces, room_id, globals_)
        if aabb is None:
            logger.warning(f"房间 {room_id} 缺少地板和天花板，已丢弃")
            discarded.append(room_id)
            continue

        entry = surfaces.rooms[room_id]
        provisional: List[ObjectInstance] = []
        key_to_ref: Dict[str, ObjectRef] = {}
        pending_links: List[Tuple[int, str]] = []
        counters: Dict[str, int] = {}
        for obj in entry.objects:
            box = build_object_aabb(obj.vertices)
            if not aabb.contains_point(box.center):
                logger.warning(f"房间 {room_id} 中物体 {obj.name} 的中心不在房间包围盒内，已忽略")
                continue
            pid = counters.get(obj.name, 0)
            counters[obj.name] = pid + 1
            instance = ObjectInstance(name=obj.name, id=pid, aabb=box,
                                      home_room=room_id, movable=obj.movable)
            if obj.key is not None:
                key_to_ref[obj.key] = instance.ref
            if obj.nested_in is not None:
                pending_links.append((len(provisional), obj.nested_in))
            provisional.append(instance)

        for index, parent_key in pending_links:
            parent = key_to_ref.get(parent_key)
            if parent is None:
                logger.warning(f"房间 {room_id} 中嵌套目标 {parent_key!r} 不存在，忽略该链接")
                continue
            provisional[index] = replace(provisional[index], nested_in=parent)

        rooms[room_id] = assign_instance_ids(Room(room_id, aabb, tuple(provisional)))

    return Scene(rooms, globals_), discarded


def render_room_listing(room: Room) -> List[str]:
    """按任务生成提示词的格式列出房间内物体包围盒

    "<name>(id)": [x min, y min, z min],[x max, y max, z max]
    """
    def fmt(v: Vec3) -> str:
        return f"[{v.x:.2f}, {v.y:.2f}, {v.z:.2f}]"

    return [f'"{obj.ref}": {fmt(obj.aabb.min)},{fmt(obj.aabb.max)}'
            for obj in sorted(room.contents, key=lambda o: (o.name, o.id))]


# ---------------------------------------------------------------------------
# 文件读写
# ---------------------------------------------------------------------------

def _at(error: InputError, position: str) -> InputError:
    if error.position is None:
        error.position = position
        error.args = (error._format(),)
    return error


def scene_from_json(doc) -> Scene:
    """解析场景JSON文档"""
    if not isinstance(doc, dict) or not isinstance(doc.get('rooms'), list):
        raise InputError("场景文档必须包含 rooms 数组")

    rooms: Dict[int, Room] = {}
    for index, room_doc in enumerate(doc['rooms']):
        try:
            room_id = int(room_doc['id'])
            if room_id in rooms:
                raise InputError(f"房间编号重复: {room_id}")
            room_aabb = Aabb.from_json(room_doc['aabb'])
            objects = []
            for obj_doc in room_doc.get('objects', []):
                nested = obj_doc.get('nested_in')
                objects.append(ObjectInstance(
                    name=str(obj_doc['name']),
                    id=int(obj_doc['id']),
                    aabb=Aabb.from_json(obj_doc['aabb']),
                    home_room=room_id,
                    movable=bool(obj_doc.get('movable', True)),
                    nested_in=ObjectRef.parse(nested) if nested else None,
                ))
            room = Room(room_id, room_aabb, _link_children(room_id, objects))
        except KeyError as e:
            raise InputError(f"rooms[{index}] 缺少字段 {e}") from e
        except InputError as e:
            raise _at(e, f"rooms[{index}]")
        except (TypeError, ValueError) as e:
            raise InputError(str(e), position=f"rooms[{index}]") from e

        outside = room.check_containment()
        if outside:
            raise InputError(f"房间 {room_id} 中以下物体的中心不在房间内: "
                             f"{', '.join(str(r) for r in outside)}")
        rooms[room_id] = room

    elevations = doc.get('global_floor_elevations', [])
    return Scene(rooms, _merge_elevations(float(e) for e in elevations))


def scene_to_json(scene: Scene) -> Dict:
    """场景序列化为JSON文档"""
    rooms = []
    for room_id in scene.room_ids:
        room = scene.rooms[room_id]
        objects = []
        for obj in sorted(room.contents, key=lambda o: (o.name, o.id)):
            obj_doc = {'name': obj.name, 'id': obj.id, 'aabb': obj.aabb.to_json(),
                       'movable': obj.movable}
            if obj.nested_in is not None:
                obj_doc['nested_in'] = str(obj.nested_in)
            objects.append(obj_doc)
        rooms.append({'id': room_id, 'aabb': room.aabb.to_json(), 'objects': objects})
    return {'rooms': rooms, 'global_floor_elevations': list(scene.global_floor_elevations)}


def load_scene(path: PathLike) -> Scene:
    """读取场景文件"""
    doc = load_json(path)
    try:
        return scene_from_json(doc)
    except InputError as e:
        raise e.with_source(str(path))


def surfaces_from_json(doc) -> LabeledSurfaces:
    """解析标注表面JSON文档

    格式: {rooms: [{id, floor: [[x,y,z],...]|null, ceiling: ...,
                    objects: [{name, vertices, movable, key, nested_in}]}]}
    """
    if not isinstance(doc, dict) or not isinstance(doc.get('rooms'), list):
        raise InputError("标注表面文档必须包含 rooms 数组")
    rooms: Dict[int, RoomSurfaces] = {}
    for index, room_doc in enumerate(doc['rooms']):
        try:
            room_id = int(room_doc['id'])
            floor = room_doc.get('floor')
            ceiling = room_doc.get('ceiling')
            objects = tuple(
                SurfaceObject(name=str(o['name']),
                              vertices=_points(o.get('vertices'), f"物体 {o['name']} 顶点"),
                              movable=bool(o.get('movable', True)),
                              key=o.get('key'), nested_in=o.get('nested_in'))
                for o in room_doc.get('objects', []))
            rooms[room_id] = RoomSurfaces(
                room_id=room_id,
                floor=None if floor is None else _points(floor, f"房间 {room_id} 地板"),
                ceiling=None if ceiling is None else _points(ceiling, f"房间 {room_id} 天花板"),
                objects=objects)
        except KeyError as e:
            raise InputError(f"rooms[{index}] 缺少字段 {e}") from e
        except InputError as e:
            raise _at(e, f"rooms[{index}]")
    return LabeledSurfaces(rooms)


def load_surfaces(path: PathLike) -> LabeledSurfaces:
    """读取标注表面文件"""
    doc = load_json(path)
    try:
        return surfaces_from_json(doc)
    except InputError as e:
        raise e.with_source(str(path))
