#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
memsim 命令行入口

子命令: validate, score, fuse, build-scene, bank commit|show|replay
退出码: 0 成功/轨迹有效；1 领域失败（轨迹无效、记忆库为空）；2 输入或I/O错误
机器输出写到文件或标准输出，诊断信息经日志写到标准错误。
"""

import argparse
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .action_grammar import load_trajectory
from .config_adapter import MemSimConfig, load_config
from .episode import observation_seed, replay_memory
from .errors import EmptyBankError, InputError, MemSimError
from .file_formats import as_matrix, dump_json, dumps_json, load_json
from .memory_core import (MemoryBank, ProjectionParams, QueryInit, WorkingMemory,
                          assemble_context, bank_to_json, commit, downsample_tokens,
                          fuse, fuse_bruteforce, init_params, load_bank,
                          params_from_json, synthesize_observation)
from .metrics import (ManifestEntry, RunManifest, format_report_table, load_manifest,
                      score_suite)
from .scene_model import build_scene, load_scene, load_surfaces, render_room_listing, scene_to_json
from .trajectory_sim import report_to_json, validate

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_INPUT = 2


class MemSimHarness:
    """命令执行器：持有配置与日志，按子命令分发"""

    def __init__(self, config: MemSimConfig):
        self.config = config
        self._setup_logging()
        self._params: Optional[ProjectionParams] = None

    def _setup_logging(self):
        """设置日志系统"""
        log_level = self.config.log_level
        log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

        self.logger = logging.getLogger('memsim')
        self.logger.setLevel(getattr(logging, log_level))

        # 清除已有的处理器
        self.logger.handlers.clear()

        # 控制台处理器（标准错误）
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, log_level))
        console_handler.setFormatter(logging.Formatter(log_format))
        self.logger.addHandler(console_handler)

        # 文件处理器，log_dir 为空时不写日志文件
        if self.config.log_dir:
            Path(self.config.log_dir).mkdir(parents=True, exist_ok=True)
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            log_file = os.path.join(self.config.log_dir, f'memsim_{timestamp}.log')
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(getattr(logging, log_level))
            file_handler.setFormatter(logging.Formatter(log_format))
            self.logger.addHandler(file_handler)
            self.logger.debug(f"日志文件: {log_file}")

    # ------------------------------------------------------------------
    # 公共工具
    # ------------------------------------------------------------------

    def _emit(self, doc: Any, out: Optional[str]):
        if out:
            path = dump_json(doc, out)
            self.logger.info(f"已写出: {path}")
        else:
            sys.stdout.write(dumps_json(doc))
            sys.stdout.flush()

    @property
    def params(self) -> ProjectionParams:
        """投影参数：配置中给出文件时读取，否则按 params_seed 初始化"""
        if self._params is None:
            if self.config.params_path:
                try:
                    self._params = params_from_json(load_json(self.config.params_path))
                except InputError as e:
                    raise e.with_source(self.config.params_path)
            else:
                self._params = init_params(self.config.fusion, self.config.params_seed)
            if self._params.d != self.config.fusion.d or self._params.m != self.config.fusion.m:
                raise InputError(f"投影参数维度 (d={self._params.d}, M={self._params.m}) "
                                 f"与配置 (d={self.config.fusion.d}, M={self.config.fusion.m}) 不一致")
        return self._params

    def _synthetic_features(self, label: str) -> np.ndarray:
        fusion = self.config.fusion
        grid = synthesize_observation(fusion, observation_seed(label, self.config.seed))
        return downsample_tokens(grid, fusion.n, fusion.fps_start, fusion.token_cap)

    @staticmethod
    def _read_features(path: str) -> np.ndarray:
        """读取特征矩阵文件：{"features": [[...]]} 或直接的二维数组"""
        doc = load_json(path)
        if isinstance(doc, dict):
            doc = doc.get('features')
        try:
            return as_matrix(doc, "features")
        except InputError as e:
            raise e.with_source(path)

    # ------------------------------------------------------------------
    # 子命令
    # ------------------------------------------------------------------

    def cmd_validate(self, args) -> int:
        scene = load_scene(args.scene)
        traj = load_trajectory(args.trajectory)
        infer = self.config.infer_rooms and not args.no_infer_rooms
        report = validate(scene, traj, args.start_room, infer_rooms=infer)

        doc = report_to_json(report)
        doc['seed'] = self.config.seed
        self._emit(doc, args.out)

        for verdict in report.errors:
            self.logger.warning(f"步骤 {verdict.index} 无效 ({verdict.error_kind.value}): "
                                f"{verdict.action}")
        if report.holding_at_end:
            self.logger.warning("轨迹结束时手中仍持有物体")
        self.logger.info(f"轨迹{'有效' if report.trajectory_valid else '无效'}: "
                         f"{len(traj.steps)} 步, {len(report.errors)} 个无效步骤")
        return EXIT_OK if report.trajectory_valid else EXIT_DOMAIN

    def cmd_score(self, args) -> int:
        if args.manifest:
            manifest = load_manifest(args.manifest)
        else:
            missing = [flag for flag, value in (('--scene', args.scene), ('--gold', args.gold),
                                                 ('--pred', args.pred),
                                                 ('--start-room', args.start_room))
                       if value is None]
            if missing:
                raise InputError(f"单任务评分缺少参数: {', '.join(missing)}")
            manifest = RunManifest((ManifestEntry(
                scene=Path(args.scene), gold=Path(args.gold), pred=Path(args.pred),
                tier=args.tier or '', start_room=args.start_room,
                task_id=Path(args.pred).stem),))

        report = score_suite(manifest, show_progress=self.config.show_progress)
        doc = report.to_json()
        doc['seed'] = self.config.seed
        self._emit(doc, args.out)

        table = format_report_table(report)
        if args.table:
            path = Path(args.table)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(table, encoding='utf-8')
            self.logger.info(f"已写出: {path}")
        else:
            self.logger.info("评测结果:\n" + table)
        return EXIT_OK

    def _demo_bank(self, args) -> Tuple[MemoryBank, Optional[np.ndarray]]:
        if args.synthetic:
            bank = MemoryBank()
            for room in range(args.rooms):
                working = WorkingMemory(room=room, t=room + 1,
                                        features=self._synthetic_features(f"synthetic:{room}"))
                bank = commit(working, bank, self.params, self.config.fusion)
            return bank, self._synthetic_features("synthetic:working")

        if not args.bank:
            raise InputError("需要 --bank 或 --synthetic")
        bank = load_bank(args.bank)
        query = None
        if args.query:
            query = self._read_features(args.query)
        elif self.config.fusion.query_init is QueryInit.WORKING:
            raise InputError("查询初始化为 working 时需要 --query")
        return bank, query

    def cmd_fuse(self, args) -> int:
        fusion = self.config.fusion
        bank, working = self._demo_bank(args)
        if not bank.entries:
            raise EmptyBankError("记忆库为空，无法进行融合")
        if working is None:
            working = np.zeros((fusion.n, fusion.d))

        context = assemble_context(working, bank, args.strategy, args.k, self.params, fusion)
        result = fuse(working, context, self.params, fusion)
        stats = result.stats()
        stats['bank_rooms'] = context.rooms
        if args.oracle:
            reference = fuse_bruteforce(working, context, self.params, fusion)
            stats['oracle_max_abs_diff'] = float(np.max(np.abs(reference - result.fused)))
            self.logger.info(f"扩展精度校验最大绝对误差: {stats['oracle_max_abs_diff']:.3e}")

        doc = {'seed': self.config.seed, 'config': self.config.to_json(),
               'strategy': args.strategy, 'fused': result.fused,
               'weights': result.weights, 'stats': stats}
        self._emit(doc, args.out)
        self.logger.info(f"融合完成: 输出 {result.fused.shape[0]}x{result.fused.shape[1]}, "
                         f"平均注意力熵 {stats['entropy_mean']:.4f}")
        return EXIT_OK

    def cmd_build_scene(self, args) -> int:
        surfaces = load_surfaces(args.surfaces)
        scene, discarded = build_scene(surfaces)
        doc = scene_to_json(scene)
        doc['seed'] = self.config.seed
        self._emit(doc, args.out)
        if discarded:
            self.logger.warning(f"丢弃的房间（缺少可靠的竖直信息）: {discarded}")
        if args.listing:
            lines: List[str] = []
            for room_id in scene.room_ids:
                lines.append(f"room({room_id}):")
                lines.extend(render_room_listing(scene.rooms[room_id]))
            path = Path(args.listing)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        self.logger.info(f"场景包含 {len(scene.rooms)} 个房间")
        return EXIT_OK

    def cmd_bank_commit(self, args) -> int:
        if Path(args.bank).exists():
            bank = load_bank(args.bank)
        else:
            self.logger.info(f"记忆库文件 {args.bank} 不存在，从空记忆库开始")
            bank = MemoryBank()
        if args.synthetic:
            features = self._synthetic_features(f"room:{args.room}:t:{args.t}")
        elif args.features:
            features = self._read_features(args.features)
        else:
            raise InputError("需要 --features 或 --synthetic")

        working = WorkingMemory(room=args.room, t=args.t, features=features)
        bank = commit(working, bank, self.params, self.config.fusion)
        doc = bank_to_json(bank)
        doc['seed'] = self.config.seed
        self._emit(doc, args.out or args.bank)
        self.logger.info(f"已写入房间 {args.room} (t={args.t})，记忆库大小 {bank.size}")
        return EXIT_OK

    def cmd_bank_show(self, args) -> int:
        bank = load_bank(args.bank)
        doc = {'clock': bank.clock, 'size': bank.size,
               'entries': [{'room': e.room, 't': e.t, 'rows': int(e.key.shape[0]),
                            'dim': int(e.key.shape[1])} for e in bank.entries.values()]}
        self._emit(doc, args.out)
        return EXIT_OK

    def cmd_bank_replay(self, args) -> int:
        scene = load_scene(args.scene)
        traj = load_trajectory(args.trajectory)
        infer = self.config.infer_rooms and not args.no_infer_rooms
        bank, events = replay_memory(scene, traj, args.start_room, self.params,
                                     self.config.fusion, seed=self.config.seed,
                                     infer_rooms=infer)
        doc = bank_to_json(bank)
        doc['seed'] = self.config.seed
        self._emit(doc, args.out)
        if args.events:
            dump_json({'seed': self.config.seed, 'events': [e.to_json() for e in events]},
                      args.events)
        return EXIT_OK

    def run(self, args) -> int:
        handlers = {
            'validate': self.cmd_validate,
            'score': self.cmd_score,
            'fuse': self.cmd_fuse,
            'build-scene': self.cmd_build_scene,
            'commit': self.cmd_bank_commit,
            'show': self.cmd_bank_show,
            'replay': self.cmd_bank_replay,
        }
        name = args.bank_command if args.command == 'bank' else args.command
        return handlers[name](args)


def _add_common_arguments(parser: argparse.ArgumentParser, default: Any):
    parser.add_argument('--config', default=default, help='TOML配置文件路径（可选）')
    parser.add_argument('--seed', type=int, default=default,
                        help='随机种子（覆盖配置文件与 MEMSIM_SEED）')
    parser.add_argument('--log-level', default=default,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='日志级别')
    parser.add_argument('--params', default=default, help='投影参数JSON文件（覆盖配置文件）')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='memsim',
        description='多房间具身任务轨迹验证、评分与记忆融合工具',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用示例:
  memsim validate --scene scene.json --trajectory traj.json --start-room 10
  memsim score --manifest manifest.json --out report.json --table report.txt
  memsim fuse --synthetic --seed 7 --out fused.json --oracle
  memsim build-scene --surfaces surfaces.json --out scene.json
  memsim bank commit --bank bank.json --room 8 --t 3 --synthetic
  memsim bank replay --scene scene.json --trajectory traj.json --start-room 4 --out bank.json

退出码:
  0 成功 / 轨迹有效    1 轨迹无效或记忆库为空    2 输入或I/O错误
        """
    )
    _add_common_arguments(parser, default=None)
    # 子命令也接受同一组选项，未给出时不覆盖顶层的值
    common = argparse.ArgumentParser(add_help=False)
    _add_common_arguments(common, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('validate', parents=[common], help='逐步验证轨迹')
    p.add_argument('--scene', required=True)
    p.add_argument('--trajectory', required=True)
    p.add_argument('--start-room', type=int, required=True)
    p.add_argument('--out', help='报告输出路径（默认标准输出）')
    p.add_argument('--no-infer-rooms', action='store_true',
                   help='不从思考行推断 <GO TO NEW ROOM> 的目的地')

    p = sub.add_parser('score', parents=[common], help='计算 SR 与 Sub-SR')
    p.add_argument('--manifest', help='评测清单JSON')
    p.add_argument('--scene')
    p.add_argument('--gold')
    p.add_argument('--pred')
    p.add_argument('--start-room', type=int)
    p.add_argument('--tier')
    p.add_argument('--out', help='JSON报告输出路径（默认标准输出）')
    p.add_argument('--table', help='文本表格输出路径')

    p = sub.add_parser('fuse', parents=[common], help='记忆-查询注意力融合演示')
    p.add_argument('--bank')
    p.add_argument('--query')
    p.add_argument('--init', choices=[q.value for q in QueryInit], help='查询初始化方式')
    p.add_argument('--synthetic', action='store_true', help='使用合成记忆库与查询')
    p.add_argument('--rooms', type=int, default=3, help='合成记忆库的房间数')
    p.add_argument('--strategy', choices=['everything', 'recent', 'retrieval'],
                   default='everything', help='上下文选择策略')
    p.add_argument('-k', type=int, default=1, help='recent/retrieval 策略保留的记忆数')
    p.add_argument('--oracle', action='store_true', help='同时运行扩展精度校验')
    p.add_argument('--out')

    p = sub.add_parser('build-scene', parents=[common], help='由标注表面构建场景')
    p.add_argument('--surfaces', required=True)
    p.add_argument('--out')
    p.add_argument('--listing', help='房间物体包围盒列表输出路径')

    p = sub.add_parser('bank', parents=[common], help='记忆库操作')
    bank_sub = p.add_subparsers(dest='bank_command', required=True)
    q = bank_sub.add_parser('commit', parents=[common], help='写入一个房间的工作记忆')
    q.add_argument('--bank', required=True)
    q.add_argument('--room', type=int, required=True)
    q.add_argument('--t', type=int, required=True)
    q.add_argument('--features')
    q.add_argument('--synthetic', action='store_true')
    q.add_argument('--out')
    q = bank_sub.add_parser('show', parents=[common], help='显示记忆库摘要')
    q.add_argument('--bank', required=True)
    q.add_argument('--out')
    q = bank_sub.add_parser('replay', parents=[common], help='沿轨迹回放记忆更新')
    q.add_argument('--scene', required=True)
    q.add_argument('--trajectory', required=True)
    q.add_argument('--start-room', type=int, required=True)
    q.add_argument('--out')
    q.add_argument('--events', help='写入事件输出路径')
    q.add_argument('--no-infer-rooms', action='store_true')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT

    try:
        overrides: Dict[str, Any] = {'params_path': args.params}
        if getattr(args, 'init', None):
            overrides['query_init'] = args.init
        config = load_config(args.config, seed=args.seed, log_level=args.log_level,
                             overrides=overrides)
        harness = MemSimHarness(config)
        return harness.run(args)
    except EmptyBankError as e:
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (InputError, OSError) as e:
        print(f"输入错误: {e}", file=sys.stderr)
        return EXIT_INPUT
    except MemSimError as e:
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except KeyboardInterrupt:
        print("\n用户中断程序", file=sys.stderr)
        return EXIT_DOMAIN


def console_main():
    sys.exit(main())


if __name__ == '__main__':
    console_main()
