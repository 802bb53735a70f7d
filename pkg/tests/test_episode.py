#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)

记忆回放测试
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from memsim.action_grammar import load_trajectory, parse_trajectory
from memsim.episode import observation_seed, observe_room, replay_memory, room_signature
from memsim.memory_core import FusionConfig, init_params
from memsim.scene_model import load_scene
from memsim.trajectory_sim import init

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                        'input', 'fixtures')

CONFIG = FusionConfig(d=6, m=4, n=4, views=1, patch_size=2, patches_per_side=2)


@pytest.fixture(scope='module')
def scene():
    return load_scene(os.path.join(FIXTURES, 'stirfry_scene.json'))


@pytest.fixture(scope='module')
def params():
    return init_params(CONFIG, seed=0)


def _steps(*lines):
    return parse_trajectory({'task': 'test', 'steps': list(lines)})


def test_stirfry_replay_events(scene, params):
    traj = load_trajectory(os.path.join(FIXTURES, 'stirfry_trajectory.json'))
    bank, events = replay_memory(scene, traj, 4, params, CONFIG)
    assert [(e.step, e.room, e.t, e.kind) for e in events] == [
        (4, 4, 1, 'insert'),
        (7, 5, 2, 'insert'),
        (18, 8, 3, 'insert'),
        (20, 5, 4, 'update'),
    ]
    assert bank.size == 3
    assert bank.clock == 4
    assert bank.entries[5].t == 4
    assert bank.entries[8].key.shape == (CONFIG.n, CONFIG.m)


def test_unchanged_room_is_not_rewritten(scene, params):
    traj = _steps('<GO TO NEW ROOM>', '<GO TO ROOM(4)>', '<GO TO ROOM(5)>')
    bank, events = replay_memory(scene, traj, 4, params, CONFIG)
    assert [(e.room, e.kind) for e in events] == [(4, 'insert'), (5, 'insert')]
    assert bank.clock == 2


def test_invalid_navigation_does_not_commit(scene, params):
    traj = _steps('<GO TO ROOM(8)>', '<GO TO ROOM(77)>', '<GO TO ROOM(4)>')
    bank, events = replay_memory(scene, traj, 4, params, CONFIG)
    assert events == []
    assert bank.size == 0


def test_replay_is_deterministic(scene, params):
    traj = load_trajectory(os.path.join(FIXTURES, 'stirfry_trajectory.json'))
    a, _ = replay_memory(scene, traj, 4, params, CONFIG, seed=3)
    b, _ = replay_memory(scene, traj, 4, params, CONFIG, seed=3)
    c, _ = replay_memory(scene, traj, 4, params, CONFIG, seed=4)
    for room in a.entries:
        np.testing.assert_array_equal(a.entries[room].key, b.entries[room].key)
    assert not np.array_equal(a.entries[4].key, c.entries[4].key)


def test_room_signature_tracks_placements(scene):
    state = init(scene, 4)
    signature = room_signature(state, 4)
    assert signature.startswith('room(4)|')
    assert 'seasonings(0)@room(4)->table(0)@room(4)' in signature
    assert room_signature(state, 8) != signature


def test_observation_depends_on_signature(scene):
    state = init(scene, 4)
    first = observe_room(state, 4, 1, CONFIG)
    again = observe_room(state, 4, 2, CONFIG)
    other = observe_room(state, 5, 1, CONFIG)
    assert first.features.shape == (CONFIG.n, CONFIG.d)
    np.testing.assert_array_equal(first.features, again.features)
    assert not np.array_equal(first.features, other.features)
    assert observation_seed('x', 0) == observation_seed('x', 0)
    assert observation_seed('x', 0) != observation_seed('x', 1)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-q']))
