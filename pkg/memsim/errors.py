#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
memsim 异常类型

输入错误（文件格式、解析、前置条件）使用异常；轨迹中的规则违例不是异常，
而是由 trajectory_sim 以 StepVerdict 的形式报告。
"""

from typing import Optional


class MemSimError(Exception):
    """memsim 所有异常的基类"""


class InputError(MemSimError, ValueError):
    """输入错误：文件无法读取、格式不正确或违反前置条件

    Args:
        message: 错误描述
        source: 出错的文件路径（可选）
        position: 出错位置，如步骤序号或 "行:列"（可选）
    """

    def __init__(self, message: str, source: Optional[str] = None,
                 position=None):
        self.message = message
        self.source = source
        self.position = position
        super().__init__(self._format())

    def _format(self) -> str:
        parts = []
        if self.source:
            parts.append(str(self.source))
        if self.position is not None:
            parts.append(f"位置 {self.position}")
        if parts:
            return f"{': '.join(parts)}: {self.message}"
        return self.message

    def with_source(self, source: str) -> "InputError":
        """返回附带文件名的同类异常"""
        self.source = source
        self.args = (self._format(),)
        return self


class MalformedToken(InputError):
    """以 '<' 开头但不匹配任何动作令牌产生式"""


class NonIntegerId(InputError):
    """编号不是无符号十进制整数（或带前导零）"""


class TrajectoryParseError(InputError):
    """轨迹文档中某一步解析失败，position 为 0 起始的步骤序号"""

    def __init__(self, message: str, index: int, source: Optional[str] = None):
        self.index = index
        super().__init__(message, source=source, position=index)


class SceneMismatch(InputError):
    """两个状态或轨迹来自不同的场景"""


class NoSuchRoomError(InputError):
    """起始房间不存在于场景中"""


class CapacityExceeded(InputError):
    """令牌数量超过工作记忆容量上限"""


class InvalidGoldError(InputError):
    """参考轨迹在场景中无法通过验证"""


class EmptyBankError(MemSimError):
    """情景记忆库为空，无法进行记忆融合"""
