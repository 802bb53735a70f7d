"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
memsim: 多房间具身任务的轨迹验证、评分与双记忆融合工具包

主要功能：
- 由标注表面构建多房间场景（房间/物体包围盒、实例编号、嵌套关系）
- 解析与规范化高层动作令牌轨迹
- 逐步模拟并验证轨迹，比较最终摆放
- 计算任务成功率 (SR) 与子目标成功率 (Sub-SR)
- 工作记忆与情景记忆库的注意力融合、记忆更新与梯度检验
- 支持TOML配置文件与统一的命令行入口
"""


from .harness import MemSimHarness, main
__version__ = "1.0.0"
__description__ = "多房间具身任务轨迹验证与记忆融合工具包"

__all__ = [
    "MemSimHarness",
    "main",
]
