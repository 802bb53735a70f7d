#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)

分组配置适配器测试
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from memsim.config_adapter import ConfigAdapter, load_config, resolve_seed
from memsim.errors import InputError
from memsim.memory_core import QueryInit

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SAMPLE_CONFIG = os.path.join(PROJECT_ROOT, 'input', 'config.toml')


def _write(tmp_path, text, name='config.toml'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_sample_config_loads():
    config = load_config(SAMPLE_CONFIG, environ={})
    assert config.fusion.d == 32
    assert config.fusion.m == 16
    assert config.fusion.effective_scale == 16.0
    assert config.fusion.query_init is QueryInit.WORKING
    assert config.seed_source == 'config'
    assert config.log_dir == ''


def test_sections_are_flattened(tmp_path):
    path = _write(tmp_path, '[paths]\nparams = "p.json"\n[memory]\nn = 3\n')
    adapter = ConfigAdapter(path)
    assert adapter.get_config() == {'params_path': 'p.json', 'n': 3}
    assert adapter.get_section('memory') == {'n': 3}
    assert adapter.get_section('run') == {}


def test_unknown_keys_are_skipped(tmp_path):
    path = _write(tmp_path, '[memory]\nn = 3\ncolor = "red"\n[plotting]\ndpi = 300\n')
    assert ConfigAdapter(path).get_config() == {'n': 3}


def test_seed_precedence(tmp_path):
    path = _write(tmp_path, '[global]\nseed = 5\n')
    env = {'MEMSIM_SEED': '9'}
    assert load_config(path, seed=1, environ=env).seed == 1
    config = load_config(path, environ=env)
    assert (config.seed, config.seed_source) == (5, 'config')
    config = load_config(None, environ=env)
    assert (config.seed, config.seed_source) == (9, 'env')
    config = load_config(None, environ={})
    assert (config.seed, config.seed_source) == (0, 'default')


def test_resolve_seed_rejects_garbage():
    with pytest.raises(InputError):
        resolve_seed(None, None, {'MEMSIM_SEED': 'seven'})
    with pytest.raises(InputError):
        resolve_seed(None, '3', {})


def test_overrides_win_over_file(tmp_path):
    path = _write(tmp_path, '[memory]\nquery_init = "zeros"\nm = 8\n')
    config = load_config(path, overrides={'query_init': 'recent', 'params_path': None},
                         environ={})
    assert config.fusion.query_init is QueryInit.RECENT
    assert config.fusion.m == 8


def test_params_path_is_relative_to_config(tmp_path):
    path = _write(tmp_path, '[paths]\nparams = "weights/p.json"\n')
    config = load_config(path, environ={})
    assert config.params_path == str(tmp_path / 'weights' / 'p.json')
    config = load_config(path, overrides={'params_path': 'other.json'}, environ={})
    assert config.params_path == 'other.json'


def test_explicit_scale(tmp_path):
    path = _write(tmp_path, '[memory]\nscale = 2.5\n')
    assert load_config(path, environ={}).fusion.effective_scale == 2.5


@pytest.mark.parametrize('text', [
    '[memory]\nd = 8\n',
    '[memory]\nm = 5\n',
    '[memory]\nquery_init = "sideways"\n',
    '[global]\nlog_level = "LOUD"\n',
])
def test_invalid_values_are_input_errors(tmp_path, text):
    with pytest.raises(InputError):
        load_config(_write(tmp_path, text), environ={})


def test_malformed_toml_reports_position(tmp_path):
    path = _write(tmp_path, '[memory]\nd = = 3\n')
    with pytest.raises(InputError) as info:
        ConfigAdapter(path)
    assert info.value.source == path
    assert info.value.position is not None


def test_missing_config_file(tmp_path):
    with pytest.raises(InputError):
        ConfigAdapter(str(tmp_path / 'absent.toml'))


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-q']))
