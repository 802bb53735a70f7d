#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
高层动作令牌语法

轨迹由动作令牌行与自由文本思考行交错组成：

    <GO TO ROOM(id)>
    <GO TO NEW ROOM>
    <PICK UP object_name(id) from room(id) in room(id)>
    <PUT DOWN object_name(id) from room(id) on object_name(id) in room(id)>

以 '<' 开头的行必须恰好匹配一个产生式（关键字区分大小写，内部空白可任意），
其余行原样作为思考行保存。物体名称可以包含空格，例如 "flower vase(0)"。
"""

import re
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

from .errors import InputError, MalformedToken, NonIntegerId, TrajectoryParseError
from .file_formats import PathLike, load_json
from .scene_model import OBJECT_NAME_PATTERN, ObjectRef

_ID_PATTERN = re.compile(r'^(0|[1-9][0-9]*)$')

# 规范化后的产生式（括号两侧无空白，单个空格分隔）
_GO_TO_ROOM = re.compile(r'^GO TO ROOM\((?P<room>[^()]*)\)$')
_GO_TO_NEW_ROOM = re.compile(r'^GO TO NEW ROOM$')
_PICK_UP = re.compile(
    r'^PICK UP (?P<name>[^()]+)\((?P<oid>[^()]*)\)'
    r' from room\((?P<origin>[^()]*)\) in room\((?P<current>[^()]*)\)$')
_PUT_DOWN = re.compile(
    r'^PUT DOWN (?P<name>[^()]+)\((?P<oid>[^()]*)\)'
    r' from room\((?P<origin>[^()]*)\)'
    r' on (?P<target>[^()]+)\((?P<tid>[^()]*)\) in room\((?P<room>[^()]*)\)$')

_ROOM_MENTION = re.compile(r'\broom\s+(\d+)\b', re.IGNORECASE)


def _check_id(value: int, what: str):
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise InputError(f"{what} 必须是非负整数: {value!r}")


@dataclass(frozen=True)
class GoToRoom:
    """返回一个已访问过的房间"""
    room: int

    def __post_init__(self):
        _check_id(self.room, "房间编号")


@dataclass(frozen=True)
class GoToNewRoom:
    """进入一个尚未探索的房间"""


@dataclass(frozen=True)
class PickUp:
    """在 current_room 中拾取原属 origin_room 的物体"""
    object: ObjectRef
    origin_room: int
    current_room: int

    def __post_init__(self):
        _check_id(self.origin_room, "来源房间编号")
        _check_id(self.current_room, "当前房间编号")


@dataclass(frozen=True)
class PutDown:
    """把手中原属 origin_room 的物体放到 room 中的 target 上"""
    object: ObjectRef
    origin_room: int
    target: ObjectRef
    room: int

    def __post_init__(self):
        _check_id(self.origin_room, "来源房间编号")
        _check_id(self.room, "房间编号")


@dataclass(frozen=True)
class Thought:
    """自由文本思考行，原样保存"""
    text: str

    def __post_init__(self):
        if not isinstance(self.text, str):
            raise InputError("思考行必须是字符串")
        if self.text.lstrip().startswith('<'):
            raise InputError(f"思考行不能以 '<' 开头: {self.text!r}")
        if '\n' in self.text or '\r' in self.text:
            raise InputError("思考行不能包含换行")


Action = Union[GoToRoom, GoToNewRoom, PickUp, PutDown, Thought]
INTERACTIONS = (PickUp, PutDown)


@dataclass(frozen=True)
class Trajectory:
    """任务描述与按顺序排列的动作

    room_order 为可选的探索目的地标注：每个 <GO TO NEW ROOM> 对应一个房间编号或 None。
    """
    task: str
    steps: Tuple[Action, ...]
    room_order: Optional[Tuple[Optional[int], ...]] = None

    def __post_init__(self):
        if not self.steps:
            raise InputError("轨迹至少需要一个步骤")


# ---------------------------------------------------------------------------
# 解析
# ---------------------------------------------------------------------------

def _parse_id(text: str, what: str) -> int:
    if not _ID_PATTERN.match(text):
        raise NonIntegerId(f"{what} 不是规范的非负十进制整数: {text!r}")
    return int(text)


def _parse_name(text: str, line: str) -> str:
    name = ' '.join(text.split())
    if not OBJECT_NAME_PATTERN.fullmatch(name):
        raise MalformedToken(f"非法的物体名称 {text!r}: {line!r}")
    return name


def _check_balanced(line: str):
    depth = 0
    for ch in line:
        if ch == '(':
            depth += 1
            if depth > 1:
                raise MalformedToken(f"括号嵌套不合法: {line!r}")
        elif ch == ')':
            depth -= 1
            if depth < 0:
                raise MalformedToken(f"括号不匹配: {line!r}")
    if depth != 0:
        raise MalformedToken(f"括号不匹配: {line!r}")
    if not line.endswith('>') or line.count('<') != 1 or line.count('>') != 1:
        raise MalformedToken(f"尖括号不匹配: {line!r}")


def _normalize(inner: str) -> str:
    text = re.sub(r'\s*\(\s*', '(', inner)
    text = re.sub(r'\s*\)', ')', text)
    text = re.sub(r'\)(?=\S)', ') ', text)
    return ' '.join(text.split())


def parse_step(line: str) -> Action:
    """解析一行轨迹文本

    Raises:
        MalformedToken: 以 '<' 开头但不匹配任何产生式，或括号不平衡
        NonIntegerId: 编号不是规范的非负整数
    """
    if not isinstance(line, str):
        raise InputError(f"步骤必须是字符串: {line!r}")
    stripped = line.strip()
    if not stripped.startswith('<'):
        return Thought(line)

    _check_balanced(stripped)
    body = _normalize(stripped[1:-1])

    if _GO_TO_NEW_ROOM.match(body):
        return GoToNewRoom()

    match = _GO_TO_ROOM.match(body)
    if match:
        return GoToRoom(_parse_id(match.group('room'), "房间编号"))

    match = _PICK_UP.match(body)
    if match:
        return PickUp(
            object=ObjectRef(_parse_name(match.group('name'), line),
                             _parse_id(match.group('oid'), "物体编号")),
            origin_room=_parse_id(match.group('origin'), "来源房间编号"),
            current_room=_parse_id(match.group('current'), "当前房间编号"))

    match = _PUT_DOWN.match(body)
    if match:
        return PutDown(
            object=ObjectRef(_parse_name(match.group('name'), line),
                             _parse_id(match.group('oid'), "物体编号")),
            origin_room=_parse_id(match.group('origin'), "来源房间编号"),
            target=ObjectRef(_parse_name(match.group('target'), line),
                             _parse_id(match.group('tid'), "目标物体编号")),
            room=_parse_id(match.group('room'), "房间编号"))

    raise MalformedToken(f"无法识别的动作令牌: {line!r}")


def serialize_step(action: Action) -> str:
    """动作的规范文本形式（parse_step 的逆）"""
    if isinstance(action, Thought):
        return action.text
    if isinstance(action, GoToNewRoom):
        return "<GO TO NEW ROOM>"
    if isinstance(action, GoToRoom):
        return f"<GO TO ROOM({action.room})>"
    if isinstance(action, PickUp):
        return (f"<PICK UP {action.object} from room({action.origin_room})"
                f" in room({action.current_room})>")
    if isinstance(action, PutDown):
        return (f"<PUT DOWN {action.object} from room({action.origin_room})"
                f" on {action.target} in room({action.room})>")
    raise TypeError(f"未知的动作类型: {type(action).__name__}")


def parse_trajectory(doc: Dict[str, Any]) -> Trajectory:
    """解析轨迹文档 {task, steps: [...], room_order?: [...]}

    Raises:
        TrajectoryParseError: 某一步解析失败，index 为 0 起始的步骤序号
        InputError: 文档结构不正确或步骤列表为空
    """
    if not isinstance(doc, dict):
        raise InputError("轨迹文档必须是JSON对象")
    task = doc.get('task')
    steps = doc.get('steps')
    if not isinstance(task, str):
        raise InputError("轨迹文档缺少字符串字段 task")
    if not isinstance(steps, list):
        raise InputError("轨迹文档缺少数组字段 steps")
    if not steps:
        raise InputError("轨迹步骤列表为空")

    actions = []
    for index, line in enumerate(steps):
        try:
            actions.append(parse_step(line))
        except InputError as e:
            raise TrajectoryParseError(e.message, index) from e

    room_order = doc.get('room_order')
    if room_order is not None:
        if not isinstance(room_order, list):
            raise InputError("room_order 必须是数组")
        for value in room_order:
            if value is not None:
                _check_id(value, "room_order 房间编号")
        room_order = tuple(room_order)

    return Trajectory(task=task, steps=tuple(actions), room_order=room_order)


def trajectory_to_json(traj: Trajectory) -> Dict[str, Any]:
    doc = {'task': traj.task, 'steps': [serialize_step(a) for a in traj.steps]}
    if traj.room_order is not None:
        doc['room_order'] = list(traj.room_order)
    return doc


def load_trajectory(path: PathLike) -> Trajectory:
    """读取轨迹文件"""
    doc = load_json(path)
    try:
        return parse_trajectory(doc)
    except InputError as e:
        raise e.with_source(str(path))


def infer_room_order(traj: Trajectory) -> List[Optional[int]]:
    """从 <GO TO NEW ROOM> 之后的思考行推断进入的房间

    取紧随其后（直到下一个动作令牌之前）的思考行中第一个 "room <n>"；找不到时为 None。
    """
    order: List[Optional[int]] = []
    steps = traj.steps
    for index, action in enumerate(steps):
        if not isinstance(action, GoToNewRoom):
            continue
        found = None
        for follower in steps[index + 1:]:
            if not isinstance(follower, Thought):
                break
            match = _ROOM_MENTION.search(follower.text)
            if match:
                found = int(match.group(1))
                break
        order.append(found)
    return order


def count_interactions(traj: Trajectory) -> int:
    return sum(1 for a in traj.steps if isinstance(a, INTERACTIONS))
