#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
JSON 读写工具

所有输出文件都经过 dump_json：缩进 2、浮点数保留 17 位有效数字（双精度无损往返），
结尾换行。相同输入得到逐字节相同的输出。
"""

import json
import math
from pathlib import Path
from typing import Any, Union

import numpy as np

from .errors import InputError

PathLike = Union[str, Path]


def load_json(path: PathLike) -> Any:
    """读取JSON文件，解析错误转换为带文件名与行列号的 InputError"""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise InputError(f"无法读取文件: {e.strerror or e}", source=str(path)) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"JSON格式错误: {e.msg}", source=str(path),
                         position=f"{e.lineno}:{e.colno}") from e


def format_float(value: float) -> str:
    """17 位有效数字的浮点数文本"""
    value = float(value)
    if not math.isfinite(value):
        raise InputError(f"无法序列化非有限浮点数: {value}")
    text = format(value, '.17g')
    # 保证读回时仍是浮点数
    if not any(c in text for c in '.eE'):
        text += '.0'
    return text


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = ' ' * (indent * (level + 1))
    end_pad = ' ' * (indent * level)

    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        obj = int(obj)

    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return '{}'
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: "
                 f"{_encode(v, indent, level + 1)}"
                 for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))]
        return '{\n' + ',\n'.join(items) + '\n' + end_pad + '}'
    if isinstance(obj, (list, tuple)):
        if not obj:
            return '[]'
        # 数值行写在一行内，矩阵每行一行
        if all(isinstance(v, (int, float, np.integer, np.floating))
               and not isinstance(v, bool) for v in obj):
            return '[' + ', '.join(_encode(v, indent, level + 1) for v in obj) + ']'
        items = [f"{pad}{_encode(v, indent, level + 1)}" for v in obj]
        return '[\n' + ',\n'.join(items) + '\n' + end_pad + ']'
    raise TypeError(f"无法序列化类型: {type(obj).__name__}")


def dumps_json(doc: Any, indent: int = 2) -> str:
    """按固定格式序列化为JSON文本（键排序，浮点 17 位有效数字）"""
    return _encode(doc, indent, 0) + '\n'


def dump_json(doc: Any, path: PathLike) -> Path:
    """写出JSON文件，必要时创建父目录"""
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(doc), encoding='utf-8')
    return path


def as_matrix(value: Any, name: str, columns: int = None) -> np.ndarray:
    """把嵌套列表转换为二维 float64 数组并检查有限性与列数"""
    try:
        matrix = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise InputError(f"{name} 不是数值矩阵: {e}") from e
    if matrix.ndim != 2:
        raise InputError(f"{name} 应为二维矩阵，实际维度 {matrix.ndim}")
    if columns is not None and matrix.shape[1] != columns:
        raise InputError(f"{name} 列数应为 {columns}，实际 {matrix.shape[1]}")
    if not np.all(np.isfinite(matrix)):
        raise InputError(f"{name} 含有非有限数值")
    return matrix
