"""blobbench: 大对象存储老化基准与碎片分析工具"""

__version__ = "0.1.0"
