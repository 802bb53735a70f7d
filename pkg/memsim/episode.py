#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
沿轨迹回放记忆更新策略

有效的导航步骤使智能体离开某个房间时，该房间的工作记忆在下一个时间步写入情景记忆库；
已在记忆库中的房间只有在内容变化后才重新写入。房间的工作记忆是以其当前摆放签名为种子的
确定性合成观测。
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .action_grammar import GoToNewRoom, GoToRoom, Trajectory, infer_room_order
from .memory_core import (FusionConfig, MemoryBank, ProjectionParams, WorkingMemory,
                          commit, downsample_tokens, synthesize_observation)
from .scene_model import FLOOR_NAME, Scene
from .trajectory_sim import SimState, init, step

logger = logging.getLogger('memsim.episode')


@dataclass(frozen=True)
class MemoryEvent:
    """一次记忆写入"""
    step: int
    room: int
    t: int
    kind: str        # 'insert' 或 'update'

    def to_json(self) -> Dict:
        return {'step': self.step, 'room': self.room, 't': self.t, 'kind': self.kind}


def room_signature(state: SimState, room: int) -> str:
    """房间当前的摆放签名：排序后的 物体@来源 -> 支撑"""
    rows = sorted(f"{slot.key}->{FLOOR_NAME if slot.support is None else slot.support}"
                  for slot in state.slots(room))
    return f"room({room})|" + ';'.join(rows)


def observation_seed(signature: str, seed: int) -> int:
    digest = hashlib.sha1(f"{seed}|{signature}".encode('utf-8')).digest()
    return int.from_bytes(digest[:4], 'big')


def observe_room(state: SimState, room: int, t: int, config: FusionConfig,
                 seed: int = 0) -> WorkingMemory:
    """房间的工作记忆：合成观测经 FPS 下采样到 N 个令牌"""
    grid = synthesize_observation(config, observation_seed(room_signature(state, room), seed))
    features = downsample_tokens(grid, config.n, config.fps_start, config.token_cap)
    return WorkingMemory(room=room, t=t, features=features)


def replay_memory(scene: Scene, traj: Trajectory, start_room: int,
                  params: ProjectionParams, config: FusionConfig, seed: int = 0,
                  room_order: Optional[Sequence[Optional[int]]] = None,
                  infer_rooms: bool = True) -> Tuple[MemoryBank, List[MemoryEvent]]:
    """按轨迹回放，返回最终记忆库与写入事件

    无效步骤不改变状态，也不触发写入。
    """
    if room_order is None:
        room_order = traj.room_order
    if room_order is None and infer_rooms:
        room_order = infer_room_order(traj)
    hints = list(room_order or [])

    state = init(scene, start_room)
    bank = MemoryBank()
    committed: Dict[int, str] = {}
    events: List[MemoryEvent] = []
    new_room_count = 0

    for index, action in enumerate(traj.steps):
        hint = None
        if isinstance(action, GoToNewRoom):
            if new_room_count < len(hints):
                hint = hints[new_room_count]
            new_room_count += 1
        previous = state
        state, verdict = step(state, action, scene, destination_hint=hint, index=index)
        if not verdict.valid or not isinstance(action, (GoToRoom, GoToNewRoom)):
            continue
        left = previous.agent_room
        if state.agent_room == left:
            continue

        signature = room_signature(previous, left)
        if committed.get(left) == signature:
            logger.debug(f"房间 {left} 内容未变化，跳过写入")
            continue
        t = bank.clock + 1
        kind = 'update' if left in committed else 'insert'
        bank = commit(observe_room(previous, left, t, config, seed), bank, params, config)
        committed[left] = signature
        events.append(MemoryEvent(step=index, room=left, t=t, kind=kind))

    logger.info(f"回放完成: {len(events)} 次写入，记忆库包含 {bank.size} 个房间")
    return bank, events
