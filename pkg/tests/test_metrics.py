#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)

SR / Sub-SR 评分测试
"""

import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from memsim.action_grammar import load_trajectory, parse_trajectory
from memsim.errors import InputError, InvalidGoldError
from memsim.file_formats import dump_json, load_json
from memsim.metrics import (TaskScore, aggregate, extract_subgoals, format_report_table,
                            load_manifest, score, score_suite)
from memsim.scene_model import load_scene

FIXTURES = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                        'input', 'fixtures')
STIRFRY_GOLD = os.path.join(FIXTURES, 'stirfry_trajectory.json')

SHORT_GOLD = [
    '<PICK UP seasonings(0) from room(4) in room(4)>',
    '<GO TO NEW ROOM>',
    '<GO TO NEW ROOM>',
    '<PUT DOWN seasonings(0) from room(4) on countertop(1) in room(8)>',
    '<PICK UP tomatoes(0) from room(8) in room(8)>',
    '<PUT DOWN tomatoes(0) from room(8) on countertop(1) in room(8)>',
]


def _traj(steps):
    return parse_trajectory({'task': 'test', 'steps': list(steps)})


@pytest.fixture(scope='module')
def stirfry_scene():
    return load_scene(os.path.join(FIXTURES, 'stirfry_scene.json'))


@pytest.fixture(scope='module')
def desk_scene():
    return load_scene(os.path.join(FIXTURES, 'desk_scene.json'))


def test_gold_against_itself_scores_full(stirfry_scene, desk_scene):
    gold = load_trajectory(STIRFRY_GOLD)
    result = score(stirfry_scene, gold, gold, 4)
    assert (result.sr, result.sub_sr) == (1, 1.0)

    gold = load_trajectory(os.path.join(FIXTURES, 'desk_trajectory.json'))
    result = score(desk_scene, gold, gold, 10)
    assert (result.sr, result.sub_sr) == (1, 1.0)
    assert result.total == 14


def test_subgoal_counts(stirfry_scene, desk_scene):
    assert len(extract_subgoals(load_trajectory(STIRFRY_GOLD), stirfry_scene, 4)) == 10
    desk = load_trajectory(os.path.join(FIXTURES, 'desk_trajectory.json'))
    goals = extract_subgoals(desk, desk_scene, 10)
    assert len(goals) == 14
    assert [g.kind for g in goals[:2]] == ['pick', 'put']


def test_half_of_subgoals(stirfry_scene):
    pred = _traj(SHORT_GOLD[:4])
    result = score(stirfry_scene, _traj(SHORT_GOLD), pred, 4)
    assert result.achieved == (0, 1)
    assert result.sub_sr == 0.5
    assert result.sr == 0


def test_extra_misplacement_fails_task_but_not_subgoals(stirfry_scene):
    pred = _traj(SHORT_GOLD + [
        '<PICK UP eggs(0) from room(8) in room(8)>',
        '<PUT DOWN eggs(0) from room(8) on countertop(0) in room(8)>',
    ])
    result = score(stirfry_scene, _traj(SHORT_GOLD), pred, 4)
    assert result.sub_sr == 1.0
    assert result.sr == 0


def test_invalid_steps_do_not_count(stirfry_scene):
    pred = _traj([
        '<PUT DOWN seasonings(0) from room(4) on countertop(1) in room(8)>',
    ] + SHORT_GOLD[:1])
    result = score(stirfry_scene, _traj(SHORT_GOLD), pred, 4)
    assert result.achieved == (0,)


def test_repairing_a_step_never_lowers_sub_sr(stirfry_scene):
    gold = load_trajectory(STIRFRY_GOLD)
    steps = list(load_json(STIRFRY_GOLD)['steps'])
    broken = list(steps)
    broken[13] = '<PICK UP eggs(0) from room(8) in room(5)>'
    worse = score(stirfry_scene, gold, _traj(broken), 4)
    better = score(stirfry_scene, gold, _traj(steps), 4)
    assert worse.sub_sr < better.sub_sr
    assert worse.sr == 0


def test_invalid_gold_is_rejected(stirfry_scene):
    gold = _traj(['<PICK UP toaster(0) from room(4) in room(4)>'])
    with pytest.raises(InvalidGoldError):
        score(stirfry_scene, gold, gold, 4)


def test_trajectory_without_interactions(stirfry_scene):
    gold = _traj(['<GO TO NEW ROOM>'])
    result = score(stirfry_scene, gold, gold, 4)
    assert result.total == 0
    assert (result.sr, result.sub_sr) == (1, 1.0)


# ---------------------------------------------------------------------------
# 汇总
# ---------------------------------------------------------------------------

def _scores(values, tier='simple'):
    return [TaskScore(sr=v, sub_sr=float(v), achieved=(), total=1, tier=tier) for v in values]


def test_aggregate_average():
    report = aggregate(_scores([1, 0, 0, 1]))
    assert report.row('overall').sr == 50.0
    assert report.row('simple').count == 4


def test_aggregate_is_order_independent():
    scores = (_scores([1, 0, 1], 'hard') + _scores([0, 0], 'simple')
              + [TaskScore(0, 0.25, (), 4, tier='medium', split='in-the-wild')])
    baseline = aggregate(scores).rows
    rng = random.Random(5)
    for _ in range(10):
        shuffled = list(scores)
        rng.shuffle(shuffled)
        assert aggregate(shuffled).rows == baseline
    assert [r.group for r in baseline] == ['simple', 'medium', 'hard', 'in-the-wild', 'overall']


def test_aggregate_requires_scores():
    with pytest.raises(InputError):
        aggregate([])


def test_report_table_lists_all_groups():
    text = format_report_table(aggregate(_scores([1, 0])))
    assert 'overall' in text
    assert 'Sub-SR' in text.splitlines()[0]


# ---------------------------------------------------------------------------
# 评测清单
# ---------------------------------------------------------------------------

def test_fixture_manifest():
    manifest = load_manifest(os.path.join(FIXTURES, 'manifest.json'))
    assert [e.task_id for e in manifest.entries] == ['desk-rearrange', 'stir-fry']
    report = score_suite(manifest, show_progress=False)
    assert report.row('overall').sr == 100.0
    assert [r.group for r in report.rows] == ['simple', 'hard', 'in-domain',
                                              'in-the-wild', 'overall']


def test_twelve_task_suite(tmp_path):
    steps = list(load_json(STIRFRY_GOLD)['steps'])
    del steps[21]
    broken = dump_json({'task': 'broken', 'steps': steps}, tmp_path / 'broken.json')

    tasks = []
    for i in range(12):
        tasks.append({
            'scene': os.path.join(FIXTURES, 'stirfry_scene.json'),
            'gold': STIRFRY_GOLD,
            'pred': str(broken) if i % 3 == 2 else STIRFRY_GOLD,
            'tier': ('simple', 'medium', 'hard')[i % 3],
            'split': 'in-domain' if i % 2 == 0 else 'in-the-wild',
            'start_room': 4,
        })
    manifest_path = dump_json({'tasks': tasks}, tmp_path / 'manifest.json')

    report = score_suite(load_manifest(manifest_path), show_progress=False)
    assert len(report.tasks) == 12
    assert report.tasks[2].task_id == 'task_2'
    assert report.tasks[2].sub_sr == 0.9

    rows = {r.group: (r.count, r.sr, r.sub_sr) for r in report.rows}
    assert rows['simple'] == (4, 100.0, 100.0)
    assert rows['medium'] == (4, 100.0, 100.0)
    assert rows['hard'] == (4, 0.0, 90.0)
    assert rows['in-domain'] == (6, 66.7, 96.7)
    assert rows['in-the-wild'] == (6, 66.7, 96.7)
    assert rows['overall'] == (12, 66.7, 96.7)


def test_manifest_with_missing_file(tmp_path):
    path = dump_json({'tasks': [{'scene': 'nope.json', 'gold': 'g.json', 'pred': 'p.json',
                                 'tier': 'simple', 'start_room': 1}]},
                     tmp_path / 'manifest.json')
    with pytest.raises(InputError) as info:
        load_manifest(path)
    assert info.value.position == 'tasks[0]'


def test_manifest_without_tasks(tmp_path):
    path = dump_json({'tasks': []}, tmp_path / 'manifest.json')
    with pytest.raises(InputError):
        load_manifest(path)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-q']))
