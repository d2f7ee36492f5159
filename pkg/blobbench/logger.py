"""日志配置模块

包内所有 logger 都挂在 blobbench 根 logger 下：文件输出固定开启，
终端输出（rich）只在命令行 --verbose 时打开。
"""

import logging
import os
from pathlib import Path

from rich.logging import RichHandler

ROOT_LOGGER = "blobbench"
LOG_FILE = "bench.log"
LOG_FORMAT = "[%(asctime)s] [%(filename)s:%(lineno)d] %(levelname)s - %(message)s"

_loggers = {}


def setup_logger(
    log_dir: str = None,
    force: bool = False,
    console: bool = False,
    level: int = logging.INFO,
):
    """
    设置日志系统

    已经配置过时直接返回，除非 force=True（测试中切换日志目录）。

    Args:
        log_dir: 日志目录路径，默认为 ~/.blobbench/logs/
        force: 强制重新设置
        console: 是否同时输出到终端（rich 渲染）
        level: 日志级别
    """
    root_logger = logging.getLogger(ROOT_LOGGER)
    if root_logger.handlers and not force:
        return

    for handler in list(root_logger.handlers):
        handler.close()
    root_logger.handlers.clear()
    root_logger.setLevel(level)

    if log_dir is None:
        log_dir = os.path.expanduser("~/.blobbench/logs")
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)

    file_handler = logging.FileHandler(log_path / LOG_FILE, encoding="utf-8")
    file_handler.setLevel(level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    root_logger.addHandler(file_handler)

    if console:
        console_handler = RichHandler(show_path=False, markup=False)
        console_handler.setLevel(level)
        root_logger.addHandler(console_handler)


def get_logger(name: str) -> logging.Logger:
    """
    获取 logger 实例

    包内模块传入 __name__（如 blobbench.harness）时不会重复加前缀。

    Args:
        name: logger 名称

    Returns:
        blobbench.<name> 子 logger
    """
    if name not in _loggers:
        if name == ROOT_LOGGER or name.startswith(f"{ROOT_LOGGER}."):
            full_name = name
        else:
            full_name = f"{ROOT_LOGGER}.{name}"
        _loggers[name] = logging.getLogger(full_name)
    return _loggers[name]
