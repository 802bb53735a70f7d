#!/usr/bin/env python3
"""
license:
    MIT License
    (https://opensource.org/licenses/MIT)
"""
"""
双记忆数值核心

- 3D 图像块：像素反投影得到世界坐标，正弦位置编码加到图像块特征上
- FPS 下采样到固定的令牌数 N
- MLP 投影到记忆空间，键/值两个仿射头，时间步正弦编码在写入记忆库时相加
- 记忆-查询注意力融合：f^M = Concat[softmax(q f^K^T / sqrt(C)) f^V ; q]
- 记忆库每个房间至多一条记录，写入时间步必须单调递增
- 解析梯度与中心差分的梯度检验
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit, softmax

from .errors import CapacityExceeded, EmptyBankError, InputError
from .file_formats import PathLike, as_matrix, dump_json, load_json

logger = logging.getLogger('memsim.memory_core')

ORTHONORMAL_TOLERANCE = 1e-9
PARAM_GROUPS = ('w1', 'b1', 'w2', 'b2', 'wk', 'bk', 'wv', 'bv', 'wq', 'bq')
ACTIVATIONS = ('silu', 'identity')


class QueryInit(str, Enum):
    """查询初始化方式"""
    WORKING = 'working'      # 由工作记忆经查询映射得到
    RECENT = 'recent'        # 使用最近一条记忆的键
    ZEROS = 'zeros'          # 全零查询


@dataclass(frozen=True)
class FusionConfig:
    """记忆融合的维度与超参数"""
    d: int = 32
    m: int = 16
    n: int = 8
    views: int = 2
    patch_size: int = 16
    query_init: QueryInit = QueryInit.WORKING
    scale: Optional[float] = None
    time_embed_base: float = 10000.0
    time_embed_enabled: bool = True
    token_cap: int = 8192
    fps_start: int = 0
    patches_per_side: int = 4

    def __post_init__(self):
        for name in ('d', 'm', 'n', 'views', 'patch_size', 'token_cap', 'patches_per_side'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise InputError(f"配置项 {name} 必须是正整数: {value!r}")
        if self.d % 6 != 0:
            raise InputError(f"模型维度 d={self.d} 必须能被 6 整除（每个坐标轴一组 sin/cos）")
        if self.m % 2 != 0:
            raise InputError(f"记忆维度 M={self.m} 必须是偶数")
        if self.scale is not None and not (self.scale > 0 and np.isfinite(self.scale)):
            raise InputError(f"缩放系数 C 必须是正数: {self.scale}")
        if not self.time_embed_base > 0:
            raise InputError(f"时间编码基数必须是正数: {self.time_embed_base}")
        if self.fps_start < 0:
            raise InputError(f"FPS 起始索引不能为负: {self.fps_start}")
        if not isinstance(self.query_init, QueryInit):
            object.__setattr__(self, 'query_init', QueryInit(self.query_init))

    @property
    def effective_scale(self) -> float:
        return float(self.m if self.scale is None else self.scale)


# ---------------------------------------------------------------------------
# 相机与 3D 图像块
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CameraModel:
    """针孔相机：内参 fx, fy, cx, cy（像素）与相机到世界的 4x4 位姿"""
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"焦距必须为正: fx={self.fx}, fy={self.fy}")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
            raise InputError("相机位姿必须是有限的 4x4 矩阵")
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], rtol=0.0, atol=ORTHONORMAL_TOLERANCE):
            raise InputError("相机位姿最后一行必须是 [0, 0, 0, 1]")
        rotation = pose[:3, :3]
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOLERANCE:
            raise InputError("相机位姿的旋转部分不是正交矩阵")
        object.__setattr__(self, 'pose', pose)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.pose[:3, 3]

    def to_json(self) -> Dict:
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'pose': self.pose}


def unproject(camera: CameraModel, u, v, z) -> np.ndarray:
    """像素 (u, v) 与深度 z 反投影到世界坐标

    标量输入返回形状 (3,)，数组输入返回 (..., 3)。
    """
    u, v, z = (np.asarray(a, dtype=np.float64) for a in (u, v, z))
    if np.any(z <= 0):
        raise InputError("深度必须为正")
    cam = np.stack([(u - camera.cx) * z / camera.fx,
                    (v - camera.cy) * z / camera.fy,
                    z], axis=-1)
    return cam @ camera.rotation.T + camera.translation


def reproject(camera: CameraModel, point) -> Tuple[float, float, float]:
    """世界坐标点投影回像素 (u, v) 与深度 z"""
    point = np.asarray(point, dtype=np.float64)
    cam = camera.rotation.T @ (point - camera.translation)
    z = cam[2]
    if z <= 0:
        raise InputError(f"点位于相机后方: z={z}")
    return (float(cam[0] * camera.fx / z + camera.cx),
            float(cam[1] * camera.fy / z + camera.cy),
            float(z))


def _sinusoid(values: np.ndarray, width: int, base: float) -> np.ndarray:
    """交错的 sin/cos 编码，频率 base^(-2i/width)"""
    half = width // 2
    freqs = base ** (-2.0 * np.arange(half) / width)
    angles = np.asarray(values, dtype=np.float64)[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (width,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def position_embed(positions, d: int, base: float = 10000.0) -> np.ndarray:
    """每个坐标轴 d/3 个通道的正弦位置编码，按 x, y, z 顺序拼接为 N x d"""
    positions = as_matrix(positions, "positions", columns=3)
    if d % 6 != 0:
        raise InputError(f"位置编码维度 d={d} 必须能被 6 整除")
    lanes = d // 3
    return np.concatenate([_sinusoid(positions[:, axis], lanes, base)
                           for axis in range(3)], axis=1)


def time_embed(t: int, m: int, base: float = 10000.0) -> np.ndarray:
    """时间步 t 的正弦编码，长度 M"""
    if m % 2 != 0:
        raise InputError(f"时间编码维度 M={m} 必须是偶数")
    if t < 0:
        raise InputError(f"时间步不能为负: {t}")
    return _sinusoid(np.float64(t), m, base)


def fps(points, n: int, start: int = 0) -> List[int]:
    """最远点采样

    每次加入到已选集合距离最远的点，距离相同取最小索引；按选择顺序返回。
    n >= K 时按顺序返回全部索引。
    """
    points = as_matrix(points, "points", columns=3)
    k = points.shape[0]
    if k == 0:
        raise InputError("FPS 输入点集为空")
    if n < 0:
        raise InputError(f"采样数不能为负: {n}")
    if not 0 <= start < k:
        raise InputError(f"FPS 起始索引 {start} 超出范围 [0, {k})")
    if n >= k:
        return list(range(k))
    if n == 0:
        return []

    selected = [start]
    dist = ((points - points[start]) ** 2).sum(axis=1)
    dist[start] = -1.0
    while len(selected) < n:
        index = int(np.argmax(dist))
        selected.append(index)
        dist = np.minimum(dist, ((points - points[index]) ** 2).sum(axis=1))
        dist[selected] = -1.0
    return selected


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """V 个视角的 3D 图像块：特征 V x (w*h) x d，位置 V x (w*h) x 3"""
    features: np.ndarray
    positions: np.ndarray
    width: int
    height: int
    patch_size: int

    def __post_init__(self):
        if self.features.ndim != 3 or self.positions.ndim != 3:
            raise InputError("图像块特征与位置必须是三维数组")
        views, count, _ = self.features.shape
        if count != self.width * self.height:
            raise InputError(f"每个视角的图像块数 {count} 与 {self.width}x{self.height} 不一致")
        if self.positions.shape != (views, count, 3):
            raise InputError(f"位置数组形状 {self.positions.shape} 与特征不一致")

    @property
    def views(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[2]


def build_patch_grid(features, depths, cameras: Sequence[CameraModel],
                     patch_size: int, base: float = 10000.0) -> PatchGrid:
    """构建像素对齐的 3D 图像块

    features: V x (w*h) x d 的图像块特征（行优先）
    depths:   V x H x W 的深度图
    每个图像块取中心像素的深度反投影，位置编码加到特征上。
    """
    features = np.asarray(features, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim != 3:
        raise InputError("深度图必须是 V x H x W 数组")
    views, height_px, width_px = depths.shape
    if len(cameras) != views or features.ndim != 3 or features.shape[0] != views:
        raise InputError(f"视角数不一致: 深度 {views}, 相机 {len(cameras)}, "
                         f"特征 {features.shape[0] if features.ndim == 3 else '?'}")
    w, h = width_px // patch_size, height_px // patch_size
    if w == 0 or h == 0:
        raise InputError(f"图像 {width_px}x{height_px} 小于图像块大小 {patch_size}")
    if features.shape[1] != w * h:
        raise InputError(f"特征行数 {features.shape[1]} 应为 {w * h}")
    d = features.shape[2]

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing='ij')
    pv = (rows * patch_size + patch_size // 2).ravel()
    pu = (cols * patch_size + patch_size // 2).ravel()

    positions = np.empty((views, w * h, 3))
    embedded = np.empty_like(features)
    for view, camera in enumerate(cameras):
        z = depths[view, pv, pu]
        positions[view] = unproject(camera, pu.astype(np.float64), pv.astype(np.float64), z)
        embedded[view] = features[view] + position_embed(positions[view], d, base)
    return PatchGrid(embedded, positions, w, h, patch_size)


def downsample_tokens(grid: PatchGrid, n: int, start: int = 0,
                      cap: int = 8192) -> np.ndarray:
    """对全部图像块位置做 FPS，按选择顺序取出 N 行特征"""
    if n > cap:
        raise CapacityExceeded(f"令牌数 {n} 超过上限 {cap}")
    points = grid.positions.reshape(-1, 3)
    index = fps(points, n, start)
    return grid.features.reshape(-1, grid.d)[index]


def synthesize_observation(config: FusionConfig, seed: int) -> PatchGrid:
    """用固定种子生成合成观测，代替 CLIP 特征与 RGB-D 输入

    相机围绕竖直 (y) 轴均匀旋转，深度在 [0.5, 4.0) 米内均匀分布。
    """
    rng = np.random.default_rng(seed)
    side = config.patches_per_side * config.patch_size
    count = config.patches_per_side ** 2
    features = rng.standard_normal((config.views, count, config.d))
    depths = rng.uniform(0.5, 4.0, size=(config.views, side, side))
    origin = rng.uniform(-1.0, 1.0, size=3)

    cameras = []
    for view in range(config.views):
        pose = np.eye(4)
        pose[:3, :3] = Rotation.from_euler('y', 2.0 * np.pi * view / config.views).as_matrix()
        pose[:3, 3] = origin
        cameras.append(CameraModel(fx=float(side), fy=float(side),
                                   cx=side / 2.0, cy=side / 2.0, pose=pose))
    return build_patch_grid(features, depths, cameras, config.patch_size,
                            config.time_embed_base)


# ---------------------------------------------------------------------------
# 投影参数
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProjectionParams:
    """MLP (d->M->M)、键/值仿射头 (M->M) 与查询映射 (d->M)"""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    activation: str = 'silu'

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"未知的激活函数: {self.activation}")
        d, m = np.shape(self.w1)
        expected = {'w1': (d, m), 'b1': (m,), 'w2': (m, m), 'b2': (m,),
                    'wk': (m, m), 'bk': (m,), 'wv': (m, m), 'bv': (m,),
                    'wq': (d, m), 'bq': (m,)}
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise InputError(f"参数 {name} 形状应为 {shape}，实际 {value.shape}")
            if not np.all(np.isfinite(value)):
                raise InputError(f"参数 {name} 含有非有限数值")
            object.__setattr__(self, name, value)

    @property
    def d(self) -> int:
        return self.w1.shape[0]

    @property
    def m(self) -> int:
        return self.w1.shape[1]

    def groups(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def with_group(self, name: str, value: np.ndarray) -> 'ProjectionParams':
        return replace(self, **{name: value})


def init_params(config: FusionConfig, seed: int, activation: str = 'silu') -> ProjectionParams:
    """按 1/sqrt(fan_in) 尺度随机初始化"""
    rng = np.random.default_rng(seed)
    d, m = config.d, config.m

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    def bias(size):
        return 0.1 * rng.standard_normal(size)

    return ProjectionParams(w1=dense(d, m), b1=bias(m), w2=dense(m, m), b2=bias(m),
                            wk=dense(m, m), bk=bias(m), wv=dense(m, m), bv=bias(m),
                            wq=dense(d, m), bq=bias(m), activation=activation)


def identity_params(d: int) -> ProjectionParams:
    """M = d 的恒等映射参数"""
    eye, zero = np.eye(d), np.zeros(d)
    return ProjectionParams(w1=eye, b1=zero, w2=eye, b2=zero, wk=eye, bk=zero,
                            wv=eye, bv=zero, wq=eye, bq=zero, activation='identity')


def params_to_json(params: ProjectionParams) -> Dict:
    doc = {name: value for name, value in params.groups().items()}
    doc['activation'] = params.activation
    return doc


def params_from_json(doc: Dict) -> ProjectionParams:
    if not isinstance(doc, dict):
        raise InputError("参数文档必须是JSON对象")
    try:
        arrays = {name: np.asarray(doc[name], dtype=np.float64) for name in PARAM_GROUPS}
    except KeyError as e:
        raise InputError(f"参数文档缺少字段 {e}") from e
    except (TypeError, ValueError) as e:
        raise InputError(f"参数不是数值数组: {e}") from e
    return ProjectionParams(activation=doc.get('activation', 'silu'), **arrays)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'identity':
        return z
    return z * expit(z)


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'identity':
        return np.ones_like(z)
    s = expit(z)
    return s + z * s * (1.0 - s)


def project_to_memory(x, params: ProjectionParams) -> Tuple[np.ndarray, np.ndarray]:
    """观测特征 N x d 投影为记忆空间的键与值（各 N x M），不含时间编码"""
    x = as_matrix(x, "observation", columns=params.d)
    hidden = _activate(x @ params.w1 + params.b1, params.activation) @ params.w2 + params.b2
    return hidden @ params.wk + params.bk, hidden @ params.wv + params.bv


def query_map(x, params: ProjectionParams) -> np.ndarray:
    x = as_matrix(x, "working memory", columns=params.d)
    return x @ params.wq + params.bq


# ---------------------------------------------------------------------------
# 记忆库
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MemoryEntry:
    """一个房间的情景记忆：键与值已加上时间编码"""
    room: int
    t: int
    key: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        if self.t < 1:
            raise InputError(f"记忆时间步必须 >= 1: {self.t}")
        if self.key.ndim != 2 or self.key.shape != self.value.shape:
            raise InputError(f"房间 {self.room} 的键/值形状不一致: "
                             f"{self.key.shape} vs {self.value.shape}")


@dataclass(frozen=True)
class MemoryBank:
    """情景记忆库：房间编号 -> 记忆，clock 为最大时间步"""
    entries: Dict[int, MemoryEntry] = field(default_factory=dict)
    clock: int = 0

    def __post_init__(self):
        if self.entries:
            latest = max(e.t for e in self.entries.values())
            if latest != self.clock:
                raise InputError(f"记忆库时钟 {self.clock} 与最大时间步 {latest} 不一致")
            dims = {e.key.shape[1] for e in self.entries.values()}
            if len(dims) != 1:
                raise InputError(f"记忆库中的记忆维度不一致: {sorted(dims)}")
        elif self.clock < 0:
            raise InputError(f"记忆库时钟不能为负: {self.clock}")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def rooms(self) -> List[int]:
        return list(self.entries)

    @property
    def token_count(self) -> int:
        return sum(e.key.shape[0] for e in self.entries.values())

    def latest(self) -> MemoryEntry:
        if not self.entries:
            raise EmptyBankError("记忆库为空")
        return max(self.entries.values(), key=lambda e: e.t)

    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.entries:
            raise EmptyBankError("记忆库为空")
        entries = list(self.entries.values())
        return (np.vstack([e.key for e in entries]),
                np.vstack([e.value for e in entries]))

    def subset(self, rooms: Sequence[int]) -> 'MemoryBank':
        entries = {room: self.entries[room] for room in rooms}
        clock = max((e.t for e in entries.values()), default=0)
        return MemoryBank(entries, clock)


@dataclass(frozen=True, eq=False)
class WorkingMemory:
    """当前房间的工作记忆：时间步 t 的 N x d 观测特征"""
    room: int
    t: int
    features: np.ndarray


def commit_projected(bank: MemoryBank, room: int, t: int, key, value,
                     config: FusionConfig) -> MemoryBank:
    """把已投影的键/值写入记忆库，返回新的记忆库

    同一房间已有记录时原位替换，记忆库大小不变。
    """
    if isinstance(t, bool) or not isinstance(t, (int, np.integer)) or t <= bank.clock:
        raise InputError(f"时间步必须大于记忆库时钟 {bank.clock}: {t}")
    key = as_matrix(key, "key")
    value = as_matrix(value, "value")
    if config.time_embed_enabled:
        embed = time_embed(int(t), key.shape[1], config.time_embed_base)
        key = key + embed
        value = value + embed

    entries = dict(bank.entries)
    replaced = room in entries
    entries[room] = MemoryEntry(room=int(room), t=int(t), key=key, value=value)
    logger.debug(f"写入房间 {room} 的记忆 (t={t}, {'替换' if replaced else '新增'})，"
                 f"记忆库大小 {len(entries)}")
    return MemoryBank(entries, int(t))


def commit(working: WorkingMemory, bank: MemoryBank, params: ProjectionParams,
           config: FusionConfig) -> MemoryBank:
    """把工作记忆投影后写入情景记忆库"""
    key, value = project_to_memory(working.features, params)
    return commit_projected(bank, working.room, working.t, key, value, config)


# ---------------------------------------------------------------------------
# 融合
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FusionResult:
    fused: np.ndarray        # N x 2M
    weights: np.ndarray      # N x (T*N)
    query: np.ndarray        # N x M
    entropy: np.ndarray      # 每行注意力熵

    def stats(self) -> Dict:
        return {'rows': int(self.fused.shape[0]), 'width': int(self.fused.shape[1]),
                'keys': int(self.weights.shape[1]),
                'entropy': self.entropy,
                'entropy_mean': float(np.mean(self.entropy)),
                'entropy_max': float(np.max(self.entropy))}


def _initial_query(working, bank: MemoryBank, params: ProjectionParams,
                   config: FusionConfig) -> np.ndarray:
    if config.query_init is QueryInit.RECENT:
        return bank.latest().key.copy()
    rows = as_matrix(working, "working memory", columns=params.d).shape[0]
    if config.query_init is QueryInit.ZEROS:
        return np.zeros((rows, params.m))
    return query_map(working, params)


def _check_bank(bank: MemoryBank, params: ProjectionParams):
    if not bank.entries:
        raise EmptyBankError("记忆库为空，无法进行融合")
    width = bank.latest().key.shape[1]
    if width != params.m:
        raise InputError(f"记忆维度 {width} 与参数维度 M={params.m} 不一致")


def _row_entropy(weights: np.ndarray) -> np.ndarray:
    safe = np.where(weights > 0, weights, 1.0)
    return -np.sum(weights * np.log(safe), axis=1)


def fuse(working, bank: MemoryBank, params: ProjectionParams,
         config: FusionConfig) -> FusionResult:
    """记忆-查询注意力融合

    f^M = Concat[softmax(q f^K^T / sqrt(C)) f^V ; q]，沿特征维拼接，输出 N x 2M。
    """
    _check_bank(bank, params)
    query = _initial_query(working, bank, params, config)
    keys, values = bank.stacked()
    logits = query @ keys.T / np.sqrt(config.effective_scale)
    weights = softmax(logits, axis=1)
    fused = np.concatenate([weights @ values, query], axis=1)
    return FusionResult(fused, weights, query, _row_entropy(weights))


def fuse_bruteforce(working, bank: MemoryBank, params: ProjectionParams,
                    config: FusionConfig) -> np.ndarray:
    """扩展精度 (longdouble) 逐元素循环实现，用作 fuse 的校验"""
    _check_bank(bank, params)
    ld = np.longdouble
    if config.query_init is QueryInit.RECENT:
        query = bank.latest().key.astype(ld)
    elif config.query_init is QueryInit.ZEROS:
        rows = as_matrix(working, "working memory", columns=params.d).shape[0]
        query = np.zeros((rows, params.m), dtype=ld)
    else:
        x = as_matrix(working, "working memory", columns=params.d).astype(ld)
        wq, bq = params.wq.astype(ld), params.bq.astype(ld)
        query = np.zeros((x.shape[0], params.m), dtype=ld)
        for i in range(x.shape[0]):
            for j in range(params.m):
                acc = bq[j]
                for k in range(params.d):
                    acc += x[i, k] * wq[k, j]
                query[i, j] = acc

    keys = [row.astype(ld) for e in bank.entries.values() for row in e.key]
    values = [row.astype(ld) for e in bank.entries.values() for row in e.value]
    scale = np.sqrt(ld(config.effective_scale))
    out = np.zeros((query.shape[0], 2 * params.m), dtype=ld)
    for i, q in enumerate(query):
        logits = [sum(q[j] * key[j] for j in range(params.m)) / scale for key in keys]
        peak = max(logits)
        exps = [np.exp(logit - peak) for logit in logits]
        total = sum(exps)
        for j in range(params.m):
            out[i, j] = sum(w * value[j] for w, value in zip(exps, values)) / total
            out[i, params.m + j] = q[j]
    return out.astype(np.float64)


def assemble_context(working, bank: MemoryBank, strategy: str, k: int,
                     params: ProjectionParams, config: FusionConfig) -> MemoryBank:
    """记忆管理基线：选择参与融合的记忆子集

    everything: 全部记忆（检查令牌上限）
    recent:     最近 k 条
    retrieval:  查询均值与各记忆键均值余弦相似度最高的 k 条（相同则取较小房间编号）
    """
    if not bank.entries:
        raise EmptyBankError("记忆库为空")
    if strategy == 'everything':
        rows = as_matrix(working, "working memory", columns=params.d).shape[0]
        if bank.token_count + rows > config.token_cap:
            raise CapacityExceeded(f"上下文令牌数 {bank.token_count + rows} "
                                   f"超过上限 {config.token_cap}")
        return bank
    if k < 1:
        raise InputError(f"k 必须 >= 1: {k}")
    if strategy == 'recent':
        ordered = sorted(bank.entries.values(), key=lambda e: -e.t)
        return bank.subset([e.room for e in ordered[:k]])
    if strategy == 'retrieval':
        probe = query_map(working, params).mean(axis=0)

        def similarity(entry: MemoryEntry) -> float:
            mean_key = entry.key.mean(axis=0)
            denom = np.linalg.norm(probe) * np.linalg.norm(mean_key)
            return float(probe @ mean_key / denom) if denom > 0 else 0.0

        ranked = sorted(bank.entries.values(), key=lambda e: (-similarity(e), e.room))
        return bank.subset([e.room for e in ranked[:k]])
    raise InputError(f"未知的上下文策略: {strategy}")


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def bank_to_json(bank: MemoryBank) -> Dict:
    return {'clock': bank.clock,
            'entries': [{'room': e.room, 't': e.t, 'key': e.key, 'value': e.value}
                        for e in bank.entries.values()]}


def bank_from_json(doc: Dict) -> MemoryBank:
    if not isinstance(doc, dict) or not isinstance(doc.get('entries'), list):
        raise InputError("记忆库文档必须包含 entries 数组")
    entries: Dict[int, MemoryEntry] = {}
    for index, row in enumerate(doc['entries']):
        try:
            room, t = row['room'], row['t']
            if not isinstance(room, int) or not isinstance(t, int) or room < 0:
                raise InputError(f"entries[{index}] 的 room/t 必须是整数")
            if room in entries:
                raise InputError(f"房间 {room} 在记忆库中出现多次")
            entries[room] = MemoryEntry(room, t, as_matrix(row['key'], f"entries[{index}].key"),
                                        as_matrix(row['value'], f"entries[{index}].value"))
        except KeyError as e:
            raise InputError(f"entries[{index}] 缺少字段 {e}") from e
    clock = doc.get('clock', 0)
    if not isinstance(clock, int):
        raise InputError(f"clock 必须是整数: {clock!r}")
    return MemoryBank(entries, clock)


def save_bank(bank: MemoryBank, path: PathLike):
    dump_json(bank_to_json(bank), path)


def load_bank(path: PathLike) -> MemoryBank:
    doc = load_json(path)
    try:
        return bank_from_json(doc)
    except InputError as e:
        raise e.with_source(str(path))


# ---------------------------------------------------------------------------
# 梯度检验
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FusionInstance:
    """梯度检验用的小实例：工作记忆与按时间顺序写入的各房间原始观测"""
    working: np.ndarray
    observations: Tuple[Tuple[int, int, np.ndarray], ...]
    config: FusionConfig


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    per_group: Dict[str, float]
    checked: int


def random_instance(seed: int, n: int = 2, t: int = 2, m: int = 4, d: int = 6,
                    activation: str = 'silu', time_embed_enabled: bool = True,
                    query_init: QueryInit = QueryInit.WORKING
                    ) -> Tuple[ProjectionParams, FusionInstance]:
    """生成随机参数与实例；房间 0..t-1 依次在时间步 1..t 写入"""
    config = FusionConfig(d=d, m=m, n=n, query_init=query_init,
                          time_embed_enabled=time_embed_enabled)
    params = init_params(config, seed, activation=activation)
    rng = np.random.default_rng(seed + 1)
    working = rng.standard_normal((n, d))
    observations = tuple((room, room + 1, rng.standard_normal((n, d))) for room in range(t))
    return params, FusionInstance(working, observations, config)


def _build_bank(params: ProjectionParams, instance: FusionInstance) -> MemoryBank:
    bank = MemoryBank()
    for room, t, x in instance.observations:
        key, value = project_to_memory(x, params)
        bank = commit_projected(bank, room, t, key, value, instance.config)
    return bank


def fusion_loss(params: ProjectionParams, instance: FusionInstance) -> float:
    """标量损失：f^M 全部元素之和"""
    bank = _build_bank(params, instance)
    return float(np.sum(fuse(instance.working, bank, params, instance.config).fused))


def fusion_gradient(params: ProjectionParams, instance: FusionInstance) -> Dict[str, np.ndarray]:
    """fusion_loss 对全部参数组的解析梯度"""
    config = instance.config
    act = params.activation
    caches = []
    for room, t, x in instance.observations:
        x = as_matrix(x, "observation", columns=params.d)
        z1 = x @ params.w1 + params.b1
        a = _activate(z1, act)
        hidden = a @ params.w2 + params.b2
        caches.append((x, z1, a, hidden))

    bank = _build_bank(params, instance)
    query = _initial_query(instance.working, bank, params, config)
    keys, values = bank.stacked()
    scale = np.sqrt(config.effective_scale)
    weights = softmax(query @ keys.T / scale, axis=1)

    d_fused = np.ones((query.shape[0], params.m))
    d_weights = d_fused @ values.T
    d_values = weights.T @ d_fused
    d_logits = weights * (d_weights - np.sum(d_weights * weights, axis=1, keepdims=True))
    d_query = np.ones_like(query) + d_logits @ keys / scale
    d_keys = d_logits.T @ query / scale

    grads = {name: np.zeros_like(value) for name, value in params.groups().items()}
    entry_rows = [e.key.shape[0] for e in bank.entries.values()]
    offsets = np.cumsum([0] + entry_rows)
    if config.query_init is QueryInit.WORKING:
        x = as_matrix(instance.working, "working memory", columns=params.d)
        grads['wq'] = x.T @ d_query
        grads['bq'] = d_query.sum(axis=0)
    elif config.query_init is QueryInit.RECENT:
        latest = list(bank.entries).index(bank.latest().room)
        d_keys[offsets[latest]:offsets[latest + 1]] += d_query

    # 记忆库中的记录顺序与观测写入顺序一致（同一房间重复写入时取最后一次）
    rooms = list(bank.entries)
    last_write = {room: i for i, (room, _, _) in enumerate(instance.observations)}
    for slot, room in enumerate(rooms):
        x, z1, a, hidden = caches[last_write[room]]
        dk = d_keys[offsets[slot]:offsets[slot + 1]]
        dv = d_values[offsets[slot]:offsets[slot + 1]]
        grads['wk'] += hidden.T @ dk
        grads['bk'] += dk.sum(axis=0)
        grads['wv'] += hidden.T @ dv
        grads['bv'] += dv.sum(axis=0)
        d_hidden = dk @ params.wk.T + dv @ params.wv.T
        grads['w2'] += a.T @ d_hidden
        grads['b2'] += d_hidden.sum(axis=0)
        dz1 = (d_hidden @ params.w2.T) * _activate_grad(z1, act)
        grads['w1'] += x.T @ dz1
        grads['b1'] += dz1.sum(axis=0)
    return grads


def grad_check(params: ProjectionParams, instance: FusionInstance, step: float = 1e-5,
               floor: float = 1e-4) -> GradCheckResult:
    """解析梯度与中心差分比较，返回最大相对误差 |a-n| / max(|a|, |n|, floor)"""
    n = as_matrix(instance.working, "working memory").shape[0]
    if n > 4 or len(instance.observations) > 3 or params.m > 8:
        raise InputError(f"梯度检验只支持小实例 (N<=4, T<=3, M<=8)，"
                         f"实际 N={n}, T={len(instance.observations)}, M={params.m}")

    analytic = fusion_gradient(params, instance)
    per_group: Dict[str, float] = {}
    checked = 0
    for name in PARAM_GROUPS:
        base = getattr(params, name)
        worst = 0.0
        for index in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[index] += step
            minus[index] -= step
            numeric = (fusion_loss(params.with_group(name, plus), instance)
                       - fusion_loss(params.with_group(name, minus), instance)) / (2.0 * step)
            a = analytic[name][index]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            checked += 1
        per_group[name] = worst
    result = GradCheckResult(max(per_group.values()), per_group, checked)
    logger.debug(f"梯度检验: {checked} 个参数，最大相对误差 {result.max_rel_error:.3e}")
    return result
