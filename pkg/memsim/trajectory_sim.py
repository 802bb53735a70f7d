#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
轨迹模拟与逐步验证

把解析后的轨迹作为确定性状态机在场景上执行，并按以下规则逐步验证：
- 位置：拾取/放下时令牌中的房间必须是智能体当前所在房间；访问的房间必须存在；
  所有房间都已探索后不能再进入新房间；只能返回已访问过的房间
- 物体：拾取的物体必须在当前房间；放下的物体必须在手中
- 手：同一时间只能拿一个物体
- 结束时手中仍有物体则整条轨迹无效

无效步骤不修改状态，验证总是走完整条轨迹。
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from .action_grammar import (Action, GoToNewRoom, GoToRoom, PickUp, PutDown,
                             Thought, Trajectory, infer_room_order, serialize_step)
from .errors import NoSuchRoomError, SceneMismatch
from .scene_model import FLOOR_NAME, Aabb, ObjectRef, Scene

logger = logging.getLogger('memsim.trajectory_sim')


class ErrorKind(str, Enum):
    """步骤错误类型"""
    NONE = 'none'
    WRONG_ROOM_PICK = 'WrongRoomPick'
    WRONG_ROOM_PUT = 'WrongRoomPut'
    NO_SUCH_ROOM = 'NoSuchRoom'
    ALL_ROOMS_EXPLORED = 'AllRoomsExplored'
    OBJECT_ABSENT = 'ObjectAbsent'
    NOT_HOLDING = 'NotHolding'
    HAND_OCCUPIED = 'HandOccupied'
    ROOM_NOT_VISITED = 'RoomNotVisited'


@dataclass(frozen=True, order=True)
class ObjectKey:
    """模拟中物体的身份：name(id) 加上它原属的房间"""
    ref: ObjectRef
    origin: int

    def __str__(self) -> str:
        return f"{self.ref}@room({self.origin})"


@dataclass(frozen=True)
class Slot:
    """物体在某房间中的摆放

    support 为 None 表示放在地板上；nested 表示该支撑关系来自场景中的显式嵌套链接，
    拾取支撑物时会一起带走。
    """
    key: ObjectKey
    support: Optional[ObjectKey]
    nested: bool
    aabb: Aabb


@dataclass(frozen=True)
class HeldObject:
    """手中物体及随之移动的嵌套子物体"""
    slot: Slot
    children: Tuple[Slot, ...] = ()

    @property
    def key(self) -> ObjectKey:
        return self.slot.key


@dataclass(frozen=True)
class SimState:
    """模拟状态

    step_index 只统计已执行的有效动作，因此无效步骤之后状态保持相等。
    """
    agent_room: int
    hand: Optional[HeldObject]
    room_contents: Dict[int, FrozenSet[Slot]]
    visited: FrozenSet[int]
    step_index: int
    scene_key: str

    def slots(self, room: int) -> FrozenSet[Slot]:
        return self.room_contents.get(room, frozenset())

    def find(self, room: int, key: ObjectKey) -> Optional[Slot]:
        for slot in self.slots(room):
            if slot.key == key:
                return slot
        return None

    def all_keys(self) -> List[ObjectKey]:
        """场景中所有物体（房间内与手中），用于物体守恒检查"""
        keys = [s.key for slots in self.room_contents.values() for s in slots]
        if self.hand is not None:
            keys.append(self.hand.key)
            keys.extend(c.key for c in self.hand.children)
        return sorted(keys)


@dataclass(frozen=True)
class StepVerdict:
    index: int
    valid: bool
    error_kind: ErrorKind = ErrorKind.NONE
    action: str = ''
    warning: Optional[str] = None

    def to_json(self) -> Dict:
        doc = {'index': self.index, 'valid': self.valid,
               'error_kind': self.error_kind.value, 'action': self.action}
        if self.warning:
            doc['warning'] = self.warning
        return doc


@dataclass(frozen=True)
class ValidationReport:
    verdicts: Tuple[StepVerdict, ...]
    trajectory_valid: bool
    final_state: SimState
    holding_at_end: bool = False

    @property
    def errors(self) -> List[StepVerdict]:
        return [v for v in self.verdicts if not v.valid]


@dataclass(frozen=True, order=True)
class PlacementDiff:
    """world_diff 的一项：某物体的 (房间, 支撑) 摆放被移除或新增

    room 为 HAND_ROOM (-1) 表示在手中。
    """
    key: ObjectKey
    change: str
    room: int
    support: str

    def to_json(self) -> Dict:
        return {'object': str(self.key.ref), 'origin': self.key.origin,
                'change': self.change,
                'room': None if self.room < 0 else self.room,
                'support': self.support}


HAND_ROOM = -1


def _scene_key(scene: Scene) -> str:
    return hashlib.sha1(repr(scene.fingerprint()).encode('utf-8')).hexdigest()


def init(scene: Scene, start_room: int) -> SimState:
    """以场景初始布局创建模拟状态

    Raises:
        NoSuchRoomError: 起始房间不在场景中
    """
    if start_room not in scene.rooms:
        raise NoSuchRoomError(f"起始房间 {start_room} 不存在于场景中")

    contents: Dict[int, FrozenSet[Slot]] = {}
    for room_id in scene.room_ids:
        room = scene.rooms[room_id]
        slots = []
        for obj in room.contents:
            support = ObjectKey(obj.nested_in, room_id) if obj.nested_in is not None else None
            slots.append(Slot(ObjectKey(obj.ref, room_id), support,
                              obj.nested_in is not None, obj.aabb))
        contents[room_id] = frozenset(slots)

    return SimState(agent_room=start_room, hand=None, room_contents=contents,
                    visited=frozenset([start_room]), step_index=0,
                    scene_key=_scene_key(scene))


def _nested_closure(slots: Iterable[Slot], root: ObjectKey) -> List[Slot]:
    """root 的所有嵌套子物体（传递闭包）"""
    slots = list(slots)
    found: List[Slot] = []
    frontier = [root]
    while frontier:
        parent = frontier.pop()
        for slot in slots:
            if slot.nested and slot.support == parent and slot not in found:
                found.append(slot)
                frontier.append(slot.key)
    return sorted(found, key=lambda s: s.key)


def _resolve_support(state: SimState, room: int, target: ObjectRef) -> Optional[Slot]:
    """在房间中按 name(id) 查找支撑物；同名同号时优先原属本房间者"""
    candidates = sorted((s for s in state.slots(room) if s.key.ref == target),
                        key=lambda s: (s.key.origin != room, s.key.origin))
    return candidates[0] if candidates else None


def _place_on(aabb: Aabb, base: Aabb, top_y: float) -> Tuple[float, float, float]:
    """使物体底面贴合 top_y、水平中心对齐 base 中心的平移量"""
    c, b = aabb.center, base.center
    return (b.x - c.x, top_y - aabb.min.y, b.z - c.z)


def _invalid(state: SimState, index: int, action: Action, kind: ErrorKind,
             warning: Optional[str] = None) -> Tuple[SimState, StepVerdict]:
    return state, StepVerdict(index, False, kind, serialize_step(action), warning)


def step(state: SimState, action: Action, scene: Scene,
         destination_hint: Optional[int] = None,
         index: Optional[int] = None) -> Tuple[SimState, StepVerdict]:
    """执行一个动作

    Args:
        state: 当前状态
        action: 动作
        scene: 场景（提供房间集合与房间包围盒）
        destination_hint: <GO TO NEW ROOM> 的目的地标注（可选）
        index: 报告中使用的步骤序号，默认取 state.step_index

    Returns:
        (新状态, 步骤判定)；无效步骤返回原状态
    """
    if state.scene_key != _scene_key(scene):
        raise SceneMismatch("模拟状态与场景不匹配")
    index = state.step_index if index is None else index
    text = serialize_step(action)

    def ok(new_state: SimState, warning: Optional[str] = None):
        return (replace(new_state, step_index=state.step_index + 1),
                StepVerdict(index, True, ErrorKind.NONE, text, warning))

    if isinstance(action, Thought):
        return ok(state)

    if isinstance(action, GoToRoom):
        if action.room not in scene.rooms:
            return _invalid(state, index, action, ErrorKind.NO_SUCH_ROOM)
        if action.room not in state.visited:
            return _invalid(state, index, action, ErrorKind.ROOM_NOT_VISITED)
        warning = None
        if action.room == state.agent_room:
            warning = f"智能体已在房间 {action.room} 中"
            logger.warning(f"步骤 {index}: {warning}")
        return ok(replace(state, agent_room=action.room), warning)

    if isinstance(action, GoToNewRoom):
        unvisited = sorted(set(scene.rooms) - state.visited)
        if not unvisited:
            return _invalid(state, index, action, ErrorKind.ALL_ROOMS_EXPLORED)
        destination = unvisited[0]
        warning = None
        if destination_hint is not None:
            if destination_hint not in scene.rooms:
                return _invalid(state, index, action, ErrorKind.NO_SUCH_ROOM)
            if destination_hint in state.visited:
                warning = f"标注的房间 {destination_hint} 已访问，改为进入房间 {destination}"
                logger.warning(f"步骤 {index}: {warning}")
            else:
                destination = destination_hint
        return ok(replace(state, agent_room=destination,
                          visited=state.visited | {destination}), warning)

    if isinstance(action, PickUp):
        if action.current_room != state.agent_room:
            return _invalid(state, index, action, ErrorKind.WRONG_ROOM_PICK)
        if state.hand is not None:
            return _invalid(state, index, action, ErrorKind.HAND_OCCUPIED)
        key = ObjectKey(action.object, action.origin_room)
        room = state.agent_room
        slot = state.find(room, key)
        if slot is None:
            return _invalid(state, index, action, ErrorKind.OBJECT_ABSENT)
        children = _nested_closure(state.slots(room), key)
        removed = {slot, *children}
        contents = dict(state.room_contents)
        contents[room] = frozenset(s for s in state.slots(room) if s not in removed)
        return ok(replace(state, hand=HeldObject(slot, tuple(children)),
                          room_contents=contents))

    if isinstance(action, PutDown):
        if action.room != state.agent_room:
            return _invalid(state, index, action, ErrorKind.WRONG_ROOM_PUT)
        key = ObjectKey(action.object, action.origin_room)
        if state.hand is None or state.hand.key != key:
            return _invalid(state, index, action, ErrorKind.NOT_HOLDING)
        room = state.agent_room
        held = state.hand

        if action.target.name == FLOOR_NAME:
            support_key = None
            base = scene.rooms[room].aabb
            top_y = base.min.y
        else:
            support = _resolve_support(state, room, action.target)
            if support is None:
                return _invalid(state, index, action, ErrorKind.OBJECT_ABSENT)
            support_key = support.key
            base = support.aabb
            top_y = base.max.y

        dx, dy, dz = _place_on(held.slot.aabb, base, top_y)
        placed = Slot(key, support_key, False, held.slot.aabb.translated(dx, dy, dz))
        moved = [replace(c, aabb=c.aabb.translated(dx, dy, dz)) for c in held.children]
        contents = dict(state.room_contents)
        contents[room] = state.slots(room) | {placed, *moved}
        return ok(replace(state, hand=None, room_contents=contents))

    raise TypeError(f"未知的动作类型: {type(action).__name__}")


def validate(scene: Scene, traj: Trajectory, start_room: int,
             room_order: Optional[Sequence[Optional[int]]] = None,
             infer_rooms: bool = False) -> ValidationReport:
    """逐步验证整条轨迹

    Args:
        scene: 场景
        traj: 已解析的轨迹
        start_room: 起始房间
        room_order: <GO TO NEW ROOM> 的目的地标注；默认取轨迹自带的 room_order
        infer_rooms: 没有显式标注时，是否从思考行推断目的地

    Returns:
        验证报告；报告总是覆盖全部步骤
    """
    if room_order is None:
        room_order = traj.room_order
    if room_order is None and infer_rooms:
        room_order = infer_room_order(traj)
    hints = list(room_order or [])

    state = init(scene, start_room)
    verdicts: List[StepVerdict] = []
    new_room_count = 0
    for index, action in enumerate(traj.steps):
        hint = None
        if isinstance(action, GoToNewRoom):
            if new_room_count < len(hints):
                hint = hints[new_room_count]
            new_room_count += 1
        state, verdict = step(state, action, scene, destination_hint=hint, index=index)
        if not verdict.valid:
            logger.debug(f"步骤 {index} 无效 ({verdict.error_kind.value}): {verdict.action}")
        verdicts.append(verdict)

    holding = state.hand is not None
    valid = all(v.valid for v in verdicts) and not holding
    if holding:
        logger.info(f"轨迹结束时手中仍持有 {state.hand.key}")
    return ValidationReport(tuple(verdicts), valid, state, holding)


def _placements(state: SimState) -> set:
    def support_name(slot: Slot) -> str:
        return FLOOR_NAME if slot.support is None else str(slot.support)

    triples = {(s.key, room, support_name(s))
               for room, slots in state.room_contents.items() for s in slots}
    if state.hand is not None:
        triples.add((state.hand.key, HAND_ROOM, 'hand'))
        for child in state.hand.children:
            triples.add((child.key, HAND_ROOM, support_name(child)))
    return triples


def world_diff(a: SimState, b: SimState) -> List[PlacementDiff]:
    """两个状态中 (物体, 房间, 支撑) 三元组的对称差，按确定顺序排列

    Raises:
        SceneMismatch: 两个状态来自不同场景
    """
    if a.scene_key != b.scene_key:
        raise SceneMismatch("两个模拟状态来自不同的场景")
    pa, pb = _placements(a), _placements(b)
    diffs = [PlacementDiff(k, 'removed', r, s) for k, r, s in pa - pb]
    diffs += [PlacementDiff(k, 'added', r, s) for k, r, s in pb - pa]
    return sorted(diffs)


def state_to_json(state: SimState) -> Dict:
    """模拟状态的JSON表示（不含坐标）"""
    def slot_doc(slot: Slot) -> Dict:
        return {'object': str(slot.key.ref), 'origin': slot.key.origin,
                'support': 'floor' if slot.support is None else str(slot.support.ref),
                'support_origin': None if slot.support is None else slot.support.origin}

    hand = None
    if state.hand is not None:
        hand = slot_doc(state.hand.slot)
        hand['children'] = [slot_doc(c) for c in state.hand.children]
    rooms = {str(room): [slot_doc(s) for s in sorted(slots, key=lambda s: s.key)]
             for room, slots in sorted(state.room_contents.items())}
    return {'agent_room': state.agent_room, 'hand': hand,
            'visited': sorted(state.visited), 'rooms': rooms,
            'step_index': state.step_index}


def report_to_json(report: ValidationReport) -> Dict:
    return {'valid': report.trajectory_valid,
            'holding_at_end': report.holding_at_end,
            'verdicts': [v.to_json() for v in report.verdicts],
            'final_state': state_to_json(report.final_state)}
