"""工作负载模块

负责对象大小采样、操作流生成以及存储年龄（storage age）记账。

操作流由 WorkloadSpec 完全确定：相同的配置（含种子）生成逐字节相同的事件序列。
随机数生成器固定为 numpy PCG64，子流键见 STREAM_KEY。
"""

import hashlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from blobbench.config import SizeDistribution, WorkloadSpec
from blobbench.logger import get_logger
from blobbench.utils import KB, make_rng

# 操作流子流标识
STREAM_KEY = 0x5354


class LedgerError(RuntimeError):
    """存储年龄账本不变量被破坏"""
    pass


@dataclass(frozen=True)
class BulkCreate:
    id: int
    size: int


@dataclass(frozen=True)
class SafeWrite:
    id: int
    new_size: int


@dataclass(frozen=True)
class Read:
    id: int


@dataclass(frozen=True)
class Delete:
    id: int


@dataclass(frozen=True)
class Create:
    id: int
    size: int


@dataclass(frozen=True)
class AgeMark:
    """测量点：其后紧跟一批 Read 事件"""

    target: Fraction
    live_bytes: int
    churned_bytes: int

    @property
    def age(self) -> Fraction:
        """到达该测量点时的实际存储年龄"""
        return Fraction(self.churned_bytes, self.live_bytes)


Event = Union[BulkCreate, SafeWrite, Read, Delete, Create, AgeMark]


@dataclass(frozen=True)
class StorageAgeLedger:
    """
    存储年龄账本

    storage_age = churned_bytes / live_bytes，仅在 live_bytes > 0 时有定义。
    """

    live_bytes: int = 0
    churned_bytes: int = 0

    @property
    def storage_age(self) -> Fraction:
        """
        当前存储年龄（精确有理数）

        Raises:
            LedgerError: live_bytes 为 0
        """
        if self.live_bytes <= 0:
            raise LedgerError("live_bytes 为 0，存储年龄无定义")
        return Fraction(self.churned_bytes, self.live_bytes)


def record_churn(
    ledger: StorageAgeLedger, overwritten_or_deleted_bytes: int, new_live_delta: int
) -> StorageAgeLedger:
    """
    记录一次变动

    Args:
        ledger: 当前账本
        overwritten_or_deleted_bytes: 被覆盖或删除的对象字节数
        new_live_delta: 存活字节的变化量（可为负）

    Returns:
        新账本

    Raises:
        LedgerError: 参数为负或存活字节将变为负数
    """
    if overwritten_or_deleted_bytes < 0:
        raise LedgerError(f"变动字节不能为负: {overwritten_or_deleted_bytes}")
    live = ledger.live_bytes + new_live_delta
    if live < 0:
        raise LedgerError(
            f"存活字节将变为负数: {ledger.live_bytes} + ({new_live_delta})"
        )
    return StorageAgeLedger(
        live_bytes=live, churned_bytes=ledger.churned_bytes + overwritten_or_deleted_bytes
    )


def sample_size(dist: SizeDistribution, rng: np.random.Generator) -> int:
    """
    按分布采样一个对象大小

    定长分布直接返回均值，不消耗随机数；均匀分布在 [m(1-s), m(1+s)]
    内按 1KB 粒度等概率取值，区间关于均值对称，因此期望恰为均值。

    Args:
        dist: 大小分布
        rng: 随机数生成器

    Returns:
        对象字节数（1024 的整数倍）
    """
    if dist.kind == "constant":
        return dist.mean_bytes
    low = dist.lower_bytes // KB
    high = dist.upper_bytes // KB
    return int(rng.integers(low, high + 1)) * KB


def sample_size_within(
    dist: SizeDistribution, rng: np.random.Generator, limit: int
) -> Tuple[int, bool]:
    """
    在占用预算内采样一个大小

    均匀分布的上界截断到 limit，在截断后的区间内等概率取值，不做拒绝重采样。
    limit 不小于被替换对象的旧大小，因此截断后的区间总是非空。

    Args:
        dist: 大小分布
        rng: 随机数生成器
        limit: 新大小上限（字节）

    Returns:
        (对象字节数, 是否截断了上界)

    Raises:
        ValueError: limit 小于分布下界
    """
    if dist.kind == "constant":
        if dist.mean_bytes > limit:
            raise ValueError(f"上限 {limit} 小于定长大小 {dist.mean_bytes}")
        return dist.mean_bytes, False
    low = dist.lower_bytes // KB
    high = dist.upper_bytes // KB
    cap = min(high, limit // KB)
    if cap < low:
        raise ValueError(f"上限 {limit} 小于分布下界 {dist.lower_bytes}")
    return int(rng.integers(low, cap + 1)) * KB, cap < high


class _LiveSet:
    """支持 O(1) 增删和均匀随机选择的存活 id 集合"""

    def __init__(self):
        self._ids: List[int] = []
        self._pos: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._ids)

    def add(self, obj_id: int) -> None:
        self._pos[obj_id] = len(self._ids)
        self._ids.append(obj_id)

    def remove(self, obj_id: int) -> None:
        i = self._pos.pop(obj_id)
        last = self._ids.pop()
        if i < len(self._ids):
            self._ids[i] = last
            self._pos[last] = i

    def choice(self, rng: np.random.Generator) -> int:
        return self._ids[int(rng.integers(len(self._ids)))]


@dataclass(frozen=True)
class OperationStream:
    """由 WorkloadSpec 派生的完整事件序列"""

    spec: WorkloadSpec
    events: Tuple[Event, ...]
    # 上界被占用预算截断的采样次数
    truncated_draws: int = 0

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def count(self, kind: type) -> int:
        """统计某类事件的数量"""
        return sum(1 for e in self.events if isinstance(e, kind))

    def age_marks(self) -> List[AgeMark]:
        return [e for e in self.events if isinstance(e, AgeMark)]

    def log_lines(self) -> Iterator[str]:
        """规范化的事件日志，用于比对与摘要"""
        for e in self.events:
            if isinstance(e, BulkCreate):
                yield f"B {e.id} {e.size}"
            elif isinstance(e, SafeWrite):
                yield f"W {e.id} {e.new_size}"
            elif isinstance(e, Read):
                yield f"R {e.id}"
            elif isinstance(e, Delete):
                yield f"D {e.id}"
            elif isinstance(e, Create):
                yield f"C {e.id} {e.size}"
            else:
                yield f"A {e.target} {e.churned_bytes}/{e.live_bytes}"

    def digest(self) -> str:
        """事件日志的 sha256 摘要"""
        h = hashlib.sha256()
        for line in self.log_lines():
            h.update(line.encode("ascii"))
            h.update(b"\n")
        return h.hexdigest()


def build_stream(spec: WorkloadSpec) -> OperationStream:
    """
    生成操作流

    先批量创建对象直到下一个对象会超出 target_occupancy；之后对均匀选中的
    存活对象做安全写（或按 churn_mix 比例做 删除+创建），直到达到最后一个
    测量年龄。每个测量年龄处插入一个 AgeMark 和 read_sample_count 个 Read。
    新大小的上界截断到剩余占用预算，截断次数记在 truncated_draws 中。

    Args:
        spec: 工作负载

    Returns:
        OperationStream
    """
    logger = get_logger(__name__)
    rng = make_rng(spec.seed, STREAM_KEY)
    dist = spec.size_dist
    budget = spec.occupancy_budget_bytes

    events: List[Event] = []
    live = _LiveSet()
    sizes: Dict[int, int] = {}
    ledger = StorageAgeLedger()
    next_id = 1
    truncated = 0

    # 批量加载
    while True:
        size = sample_size(dist, rng)
        if ledger.live_bytes + size > budget:
            break
        events.append(BulkCreate(next_id, size))
        live.add(next_id)
        sizes[next_id] = size
        ledger = record_churn(ledger, 0, size)
        next_id += 1

    for target in spec.age_targets():
        while ledger.storage_age < target:
            victim = live.choice(rng)
            old = sizes[victim]
            limit = budget - ledger.live_bytes + old
            if spec.churn_mix > 0 and rng.random() < spec.churn_mix:
                new_size, clipped = sample_size_within(dist, rng, limit)
                events.append(Delete(victim))
                events.append(Create(next_id, new_size))
                live.remove(victim)
                del sizes[victim]
                live.add(next_id)
                sizes[next_id] = new_size
                next_id += 1
            else:
                new_size, clipped = sample_size_within(dist, rng, limit)
                events.append(SafeWrite(victim, new_size))
                sizes[victim] = new_size
            truncated += clipped
            ledger = record_churn(ledger, old, new_size - old)

        events.append(AgeMark(target, ledger.live_bytes, ledger.churned_bytes))
        for _ in range(spec.read_sample_count):
            events.append(Read(live.choice(rng)))

    stream = OperationStream(spec=spec, events=tuple(events), truncated_draws=truncated)
    logger.info(
        f"生成操作流: 种子={spec.seed}, 事件数={len(stream)}, "
        f"批量创建={stream.count(BulkCreate)}, 安全写={stream.count(SafeWrite)}, 截断采样={truncated}"
    )
    return stream
