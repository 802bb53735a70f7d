#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
任务成功率 (SR) 与子目标成功率 (Sub-SR)

子目标 = 参考轨迹中的每个拾取/放下令牌，按顺序作为子序列匹配预测轨迹中的有效步骤。
SR = 1 当且仅当预测轨迹有效、全部子目标达成、且最终摆放与参考轨迹一致。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from .action_grammar import PickUp, PutDown, Trajectory, load_trajectory
from .errors import InputError, InvalidGoldError
from .file_formats import PathLike, load_json
from .scene_model import ObjectRef, Scene, load_scene
from .trajectory_sim import ObjectKey, validate, world_diff

logger = logging.getLogger('memsim.metrics')

TIER_ORDER = ('simple', 'medium', 'hard')
SPLIT_ORDER = ('in-domain', 'in-the-wild')


@dataclass(frozen=True)
class SubGoal:
    """一个交互子目标"""
    kind: str                       # 'pick' 或 'put'
    object: ObjectKey
    target: Optional[ObjectRef] = None
    room: Optional[int] = None

    def matches(self, action) -> bool:
        if self.kind == 'pick':
            return (isinstance(action, PickUp)
                    and ObjectKey(action.object, action.origin_room) == self.object)
        return (isinstance(action, PutDown)
                and ObjectKey(action.object, action.origin_room) == self.object
                and action.target == self.target and action.room == self.room)

    def __str__(self) -> str:
        if self.kind == 'pick':
            return f"pick {self.object}"
        return f"put {self.object} on {self.target} in room({self.room})"


@dataclass(frozen=True)
class TaskScore:
    sr: int
    sub_sr: float
    achieved: Tuple[int, ...]
    total: int
    task_id: str = ''
    tier: str = ''
    split: str = ''

    def to_json(self) -> Dict:
        return {'id': self.task_id, 'tier': self.tier, 'split': self.split,
                'sr': self.sr, 'sub_sr': self.sub_sr,
                'achieved': list(self.achieved), 'total': self.total}


@dataclass(frozen=True)
class AggregateRow:
    group: str
    count: int
    sr: float
    sub_sr: float


@dataclass(frozen=True)
class SuiteReport:
    tasks: Tuple[TaskScore, ...]
    rows: Tuple[AggregateRow, ...]

    def row(self, group: str) -> Optional[AggregateRow]:
        for row in self.rows:
            if row.group == group:
                return row
        return None

    def to_json(self) -> Dict:
        return {'tasks': [t.to_json() for t in self.tasks],
                'aggregate': [{'group': r.group, 'count': r.count,
                               'sr': r.sr, 'sub_sr': r.sub_sr} for r in self.rows]}


@dataclass(frozen=True)
class ManifestEntry:
    scene: Path
    gold: Path
    pred: Path
    tier: str
    start_room: int
    split: str = ''
    task_id: str = ''


@dataclass(frozen=True)
class RunManifest:
    entries: Tuple[ManifestEntry, ...]


def extract_subgoals(gold: Trajectory, scene: Optional[Scene] = None,
                     start_room: Optional[int] = None) -> List[SubGoal]:
    """参考轨迹中的交互子目标，保持顺序

    给出场景与起始房间时先验证参考轨迹，无效则抛出 InvalidGoldError。
    """
    if scene is not None and start_room is not None:
        report = validate(scene, gold, start_room, infer_rooms=True)
        if not report.trajectory_valid:
            raise InvalidGoldError("参考轨迹无法在场景中通过验证")

    goals = []
    for action in gold.steps:
        if isinstance(action, PickUp):
            goals.append(SubGoal('pick', ObjectKey(action.object, action.origin_room)))
        elif isinstance(action, PutDown):
            goals.append(SubGoal('put', ObjectKey(action.object, action.origin_room),
                                 action.target, action.room))
    return goals


def score(scene: Scene, gold: Trajectory, predicted: Trajectory,
          start_room: int, task_id: str = '', tier: str = '',
          split: str = '') -> TaskScore:
    """对单个任务打分

    预测轨迹中的无效步骤按空操作继续模拟，之后的有效步骤仍可达成子目标。
    """
    gold_report = validate(scene, gold, start_room, infer_rooms=True)
    if not gold_report.trajectory_valid:
        raise InvalidGoldError("参考轨迹无法在场景中通过验证")
    goals = extract_subgoals(gold)

    pred_report = validate(scene, predicted, start_room, infer_rooms=True)
    achieved: List[int] = []
    cursor = 0
    for verdict, action in zip(pred_report.verdicts, predicted.steps):
        if cursor >= len(goals):
            break
        if verdict.valid and goals[cursor].matches(action):
            achieved.append(cursor)
            cursor += 1

    total = len(goals)
    sub_sr = len(achieved) / total if total else 1.0
    same_world = not world_diff(pred_report.final_state, gold_report.final_state)
    sr = int(pred_report.trajectory_valid and len(achieved) == total and same_world)
    return TaskScore(sr=sr, sub_sr=sub_sr, achieved=tuple(achieved), total=total,
                     task_id=task_id, tier=tier, split=split)


def _row(group: str, scores: Sequence[TaskScore]) -> AggregateRow:
    count = len(scores)
    sr = round(100.0 * sum(s.sr for s in scores) / count, 1)
    sub_sr = round(100.0 * sum(s.sub_sr for s in scores) / count, 1)
    return AggregateRow(group, count, sr, sub_sr)


def _ordered(groups, preferred) -> List[str]:
    known = [g for g in preferred if g in groups]
    return known + sorted(g for g in groups if g not in preferred)


def aggregate(scores: Sequence[TaskScore]) -> SuiteReport:
    """按难度、数据划分与总体计算平均值（百分比，保留一位小数）"""
    if not scores:
        raise InputError("没有可汇总的任务得分")

    rows = []
    tiers = {s.tier for s in scores if s.tier}
    for tier in _ordered(tiers, TIER_ORDER):
        rows.append(_row(tier, [s for s in scores if s.tier == tier]))
    splits = {s.split for s in scores if s.split}
    for split in _ordered(splits, SPLIT_ORDER):
        rows.append(_row(split, [s for s in scores if s.split == split]))
    rows.append(_row('overall', scores))
    return SuiteReport(tuple(scores), tuple(rows))


def format_report_table(report: SuiteReport) -> str:
    """对齐的文本表格"""
    width = max(len('group'), *(len(r.group) for r in report.rows))
    lines = [f"{'group':<{width}}  {'tasks':>5}  {'SR':>6}  {'Sub-SR':>6}",
             f"{'-' * width}  {'-' * 5}  {'-' * 6}  {'-' * 6}"]
    for r in report.rows:
        lines.append(f"{r.group:<{width}}  {r.count:>5d}  {r.sr:>6.1f}  {r.sub_sr:>6.1f}")
    return '\n'.join(lines) + '\n'


def load_manifest(path: PathLike) -> RunManifest:
    """读取评测清单 {tasks: [{scene, gold, pred, tier, start_room, split?, id?}]}

    相对路径相对于清单文件所在目录；所有路径在加载时检查。
    """
    path = Path(path)
    doc = load_json(path)
    if not isinstance(doc, dict) or not isinstance(doc.get('tasks'), list) or not doc['tasks']:
        raise InputError("清单必须包含非空的 tasks 数组", source=str(path))

    base = path.parent
    entries = []
    for index, row in enumerate(doc['tasks']):
        try:
            paths = {k: (base / row[k]) for k in ('scene', 'gold', 'pred')}
            for name, p in paths.items():
                if not p.is_file():
                    raise InputError(f"{name} 文件不存在: {p}", source=str(path),
                                     position=f"tasks[{index}]")
            entries.append(ManifestEntry(
                scene=paths['scene'], gold=paths['gold'], pred=paths['pred'],
                tier=str(row.get('tier', '')), start_room=int(row['start_room']),
                split=str(row.get('split', '')),
                task_id=str(row.get('id', f"task_{index}"))))
        except KeyError as e:
            raise InputError(f"缺少字段 {e}", source=str(path),
                             position=f"tasks[{index}]") from e
        except (TypeError, ValueError) as e:
            if isinstance(e, InputError):
                raise
            raise InputError(str(e), source=str(path), position=f"tasks[{index}]") from e
    return RunManifest(tuple(entries))


def score_suite(manifest: RunManifest, show_progress: bool = True) -> SuiteReport:
    """按清单顺序逐个任务打分并汇总"""
    scene_cache: Dict[Path, Scene] = {}
    scores = []
    for entry in tqdm(manifest.entries, desc="评测任务", disable=not show_progress):
        if entry.scene not in scene_cache:
            scene_cache[entry.scene] = load_scene(entry.scene)
        gold = load_trajectory(entry.gold)
        pred = load_trajectory(entry.pred)
        try:
            result = score(scene_cache[entry.scene], gold, pred, entry.start_room,
                           task_id=entry.task_id, tier=entry.tier, split=entry.split)
        except InputError as e:
            raise e.with_source(str(entry.gold))
        logger.debug(f"{entry.task_id}: SR={result.sr} Sub-SR={result.sub_sr:.3f}")
        scores.append(result)
    return aggregate(scores)
