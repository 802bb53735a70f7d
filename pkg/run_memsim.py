#!/usr/bin/env python3

import os
import sys

# 添加当前目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from memsim.harness import console_main  # noqa: E402

"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
memsim 主程序

使用方法:
    python run_memsim.py validate --scene input/fixtures/desk_scene.json \
        --trajectory input/fixtures/desk_trajectory.json --start-room 10
    python run_memsim.py --config input/config.toml fuse --synthetic --seed 7 --oracle
"""


if __name__ == "__main__":
    console_main()
