"""工具函数模块

提供字节对齐、游程计数、随机数生成器、字节数格式化等工具函数。
"""

from typing import Iterable, Sequence, Tuple

import numpy as np

KB = 1024
MB = 1024 * 1024
GB = 1024 * 1024 * 1024


def ceil_div(value: int, divisor: int) -> int:
    """
    向上取整除法

    Args:
        value: 被除数（非负）
        divisor: 除数（正数）

    Returns:
        ceil(value / divisor)
    """
    return -(-value // divisor)


def align_up(value: int, granule: int) -> int:
    """将 value 向上对齐到 granule 的整数倍"""
    return ceil_div(value, granule) * granule


def count_runs(spans: Iterable[Tuple[int, int]]) -> int:
    """
    统计按给定顺序排列的区间中，物理连续的最大游程数

    相邻两个区间只有在前一个的结束位置恰好等于后一个的起始位置时才算连续。
    顺序颠倒（后面的区间物理位置更靠前）算作断开。

    Args:
        spans: (start, end) 区间序列，按逻辑顺序排列

    Returns:
        游程数量；空序列返回 0
    """
    runs = 0
    prev_end = None
    for start, end in spans:
        if prev_end is None or start != prev_end:
            runs += 1
        prev_end = end
    return runs


def count_index_runs(indices: Sequence[int]) -> int:
    """统计整数序列中连续递增（步长为 1）的最大游程数"""
    return count_runs((i, i + 1) for i in indices)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    创建可复现的随机数生成器

    算法固定为 numpy 的 PCG64，种子经 SeedSequence([seed, *keys]) 展开，
    不同 keys 得到互相独立的子流。相同输入在任何平台上产生相同序列。

    Args:
        seed: 64 位主种子
        keys: 子流标识（非负整数）

    Returns:
        numpy Generator
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def format_bytes(num_bytes: int) -> str:
    """
    格式化字节数为人类可读的字符串

    Args:
        num_bytes: 字节数

    Returns:
        例如 "10.0MB"、"4.0KB"、"512B"
    """
    value = float(num_bytes)
    for unit in ("B", "KB", "MB", "GB"):
        if abs(value) < 1024 or unit == "GB":
            if unit == "B":
                return f"{int(value)}B"
            return f"{value:.1f}{unit}"
        value /= 1024
    return f"{value:.1f}GB"


def throughput_mb_s(num_bytes: int, elapsed_s: float) -> float:
    """计算吞吐量（MB/s），耗时为 0 时返回 0"""
    if elapsed_s <= 0:
        return 0.0
    return num_bytes / MB / elapsed_s
