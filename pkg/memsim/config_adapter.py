#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
分组配置适配器

把分组的 TOML 配置（[global]、[paths]、[memory]、[simulation]、[run]）展平为
带类型的 MemSimConfig。优先级：命令行参数 > 配置文件 > 环境变量 MEMSIM_SEED（仅种子）> 默认值。
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import toml

from .errors import InputError
from .memory_core import FusionConfig, QueryInit

logger = logging.getLogger('memsim.config_adapter')

SEED_ENV = 'MEMSIM_SEED'

# 分组 -> {原始键: 展平后的键}
_SECTION_KEYS = {
    'global': {'log_level': 'log_level', 'seed': 'seed'},
    'paths': {'log_dir': 'log_dir', 'output_dir': 'output_dir', 'params': 'params_path'},
    'memory': {'d': 'd', 'm': 'm', 'n': 'n', 'views': 'views', 'patch_size': 'patch_size',
               'scale': 'scale', 'time_embed_base': 'time_embed_base',
               'time_embed_enabled': 'time_embed_enabled', 'token_cap': 'token_cap',
               'fps_start': 'fps_start', 'patches_per_side': 'patches_per_side',
               'query_init': 'query_init'},
    'simulation': {'infer_rooms': 'infer_rooms'},
    'run': {'show_progress': 'show_progress', 'params_seed': 'params_seed'},
}

_LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


@dataclass(frozen=True)
class MemSimConfig:
    """运行配置"""
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0
    seed_source: str = 'default'
    params_seed: int = 0
    params_path: Optional[str] = None
    log_level: str = 'INFO'
    log_dir: str = ''
    output_dir: str = './output'
    infer_rooms: bool = True
    show_progress: bool = True

    def to_json(self) -> Dict[str, Any]:
        fusion = self.fusion
        return {'seed': self.seed, 'seed_source': self.seed_source,
                'params_seed': self.params_seed,
                'd': fusion.d, 'm': fusion.m, 'n': fusion.n, 'views': fusion.views,
                'patch_size': fusion.patch_size, 'scale': fusion.effective_scale,
                'time_embed_base': fusion.time_embed_base,
                'time_embed_enabled': fusion.time_embed_enabled,
                'token_cap': fusion.token_cap, 'fps_start': fusion.fps_start,
                'query_init': fusion.query_init.value}


class ConfigAdapter:
    """
    配置适配器类

    负责读取分组配置文件并转换为展平的键值对
    """

    def __init__(self, config_path: Optional[str] = None):
        """
        初始化适配器

        Args:
            config_path: 配置文件路径；为 None 时只使用默认值
        """
        self.config_path = config_path
        self.raw_config = self._load_config()
        self.adapted_config = self._adapt_config()

    def _load_config(self) -> Dict[str, Any]:
        """加载原始配置文件"""
        if self.config_path is None:
            return {}
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                return toml.load(f)
        except OSError as e:
            raise InputError(f"无法读取配置文件: {e.strerror or e}",
                             source=str(self.config_path)) from e
        except toml.TomlDecodeError as e:
            raise InputError(f"TOML格式错误: {e.msg}", source=str(self.config_path),
                             position=f"{e.lineno}:{e.colno}") from e

    def _adapt_config(self) -> Dict[str, Any]:
        """
        将分组配置展平

        Returns:
            展平后的配置字典，只包含配置文件中出现的键
        """
        adapted = {}
        for section, values in self.raw_config.items():
            mapping = _SECTION_KEYS.get(section)
            if mapping is None or not isinstance(values, dict):
                logger.warning(f"忽略未知的配置分组: [{section}]")
                continue
            for key, value in values.items():
                if key not in mapping:
                    logger.warning(f"忽略未知的配置项: [{section}] {key}")
                    continue
                adapted[mapping[key]] = value
        return adapted

    def get_config(self) -> Dict[str, Any]:
        """获取适配后的配置"""
        return self.adapted_config

    def get_section(self, section: str) -> Dict[str, Any]:
        """获取特定分组的配置"""
        return self.raw_config.get(section, {})


def resolve_seed(flag: Optional[int], file_value: Optional[Any],
                 environ: Optional[Mapping[str, str]] = None) -> Tuple[int, str]:
    """按 参数 > 配置文件 > 环境变量 > 0 的顺序确定随机种子及其来源"""
    environ = os.environ if environ is None else environ
    if flag is not None:
        return int(flag), 'flag'
    if file_value is not None:
        if isinstance(file_value, bool) or not isinstance(file_value, int):
            raise InputError(f"配置项 seed 必须是整数: {file_value!r}")
        return file_value, 'config'
    text = environ.get(SEED_ENV)
    if text is not None and text.strip():
        try:
            return int(text.strip()), 'env'
        except ValueError as e:
            raise InputError(f"环境变量 {SEED_ENV} 不是整数: {text!r}") from e
    return 0, 'default'


def _fusion_from(values: Dict[str, Any], overrides: Dict[str, Any]) -> FusionConfig:
    merged = dict(values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for name in ('d', 'm', 'n', 'views', 'patch_size', 'token_cap', 'fps_start',
                 'patches_per_side', 'time_embed_base', 'time_embed_enabled'):
        if name in merged:
            kwargs[name] = merged[name]
    scale = merged.get('scale')
    # 0 表示使用默认值 C = M
    if scale:
        kwargs['scale'] = float(scale)
    if 'query_init' in merged:
        try:
            kwargs['query_init'] = QueryInit(merged['query_init'])
        except ValueError as e:
            raise InputError(f"未知的查询初始化方式: {merged['query_init']!r}") from e
    if 'time_embed_base' in kwargs:
        kwargs['time_embed_base'] = float(kwargs['time_embed_base'])
    try:
        return FusionConfig(**kwargs)
    except TypeError as e:
        raise InputError(f"记忆配置不合法: {e}") from e


def load_config(config_path: Optional[str] = None, seed: Optional[int] = None,
                log_level: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> MemSimConfig:
    """读取配置文件并应用命令行覆盖

    Args:
        config_path: TOML 配置文件（可选）
        seed: 命令行给出的种子
        log_level: 命令行给出的日志级别
        overrides: 命令行给出的记忆维度等覆盖项（值为 None 的项被忽略）
        environ: 环境变量（默认 os.environ）
    """
    values = ConfigAdapter(config_path).get_config()
    overrides = overrides or {}

    resolved_seed, source = resolve_seed(seed, values.get('seed'), environ)
    level = str(log_level or values.get('log_level', 'INFO')).upper()
    if level not in _LOG_LEVELS:
        raise InputError(f"未知的日志级别: {level}")

    # 配置文件中的相对路径相对于配置文件所在目录
    params_path = values.get('params_path')
    if params_path and config_path and not Path(params_path).is_absolute():
        params_path = str(Path(config_path).parent / params_path)
    params_path = overrides.get('params_path') or params_path

    return MemSimConfig(
        fusion=_fusion_from(values, overrides),
        seed=resolved_seed,
        seed_source=source,
        params_seed=int(values.get('params_seed', 0)),
        params_path=params_path or None,
        log_level=level,
        log_dir=str(values.get('log_dir', '')),
        output_dir=str(values.get('output_dir', './output')),
        infer_rooms=bool(values.get('infer_rooms', True)),
        show_progress=bool(values.get('show_progress', True)),
    )
