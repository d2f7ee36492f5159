"""配置管理模块

负责工作负载、卷几何、实验矩阵配置的加载与验证。
配置文件为 YAML，每个小节内的键是扁平的，字节数一律用十进制整数。
"""

import os
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

# 标记间隔：对象大小必须是它的整数倍
MARKER_INTERVAL = 1024

# 页头结构体至少需要的字节数（magic + id + generation + position + length + crc）
MIN_PAGE_HEADER_BYTES = 32

RESULTS_ENV_VAR = "BLOBBENCH_RESULTS"


class ConfigurationError(ValueError):
    """配置不合法（分布参数、占用率、切点名称、对齐等）"""
    pass


ModelT = TypeVar("ModelT", bound=BaseModel)


def build_model(model: Type[ModelT], data: Dict[str, Any]) -> ModelT:
    """
    构造配置模型

    Raises:
        ConfigurationError: 验证失败（pydantic 的 ValidationError 被转换）
    """
    try:
        return model(**data)
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or model.__name__}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"{model.__name__} 不合法: {details}") from e


class SizeDistribution(BaseModel):
    """对象大小分布"""

    kind: Literal["constant", "uniform"] = Field(default="constant", description="分布类型")
    mean_bytes: int = Field(..., gt=0, description="平均对象大小（字节）")
    spread: float = Field(
        default=0.5, gt=0.0, lt=1.0, description="均匀分布的半宽（相对均值的比例）"
    )

    @field_validator("mean_bytes")
    @classmethod
    def validate_mean_alignment(cls, v: int) -> int:
        """均值必须是 1KB 标记间隔的整数倍"""
        if v % MARKER_INTERVAL != 0:
            raise ConfigurationError(
                f"mean_bytes 必须是 {MARKER_INTERVAL} 的整数倍，当前为 {v}"
            )
        return v

    @property
    def lower_bytes(self) -> int:
        """可能取到的最小对象大小"""
        if self.kind == "constant":
            return self.mean_bytes
        units = self.mean_bytes // MARKER_INTERVAL
        return (units - int(units * self.spread)) * MARKER_INTERVAL

    @property
    def upper_bytes(self) -> int:
        """可能取到的最大对象大小"""
        if self.kind == "constant":
            return self.mean_bytes
        units = self.mean_bytes // MARKER_INTERVAL
        return (units + int(units * self.spread)) * MARKER_INTERVAL


class WorkloadSpec(BaseModel):
    """一次实验的工作负载定义"""

    seed: int = Field(default=0, ge=0, le=2**64 - 1, description="64 位随机种子")
    size_dist: SizeDistribution
    volume_capacity_bytes: int = Field(..., gt=0, description="卷数据区容量")
    target_occupancy: float = Field(default=0.9, gt=0.0, lt=1.0, description="目标占用率")
    write_buffer_bytes: int = Field(default=65536, gt=0, description="写缓冲大小")
    measurement_ages: List[float] = Field(
        default_factory=lambda: [0.0, 2.0, 4.0], description="测量读吞吐的存储年龄"
    )
    read_sample_count: int = Field(default=1000, gt=0, description="每次读测量的对象数")
    churn_mix: float = Field(
        default=0.0, ge=0.0, le=1.0, description="老化事件中 删除+创建 所占比例"
    )

    @field_validator("write_buffer_bytes")
    @classmethod
    def validate_buffer(cls, v: int) -> int:
        """写缓冲必须能被 1KB 标记间隔整除"""
        if v % MARKER_INTERVAL != 0:
            raise ConfigurationError(
                f"write_buffer_bytes 必须是 {MARKER_INTERVAL} 的整数倍，当前为 {v}"
            )
        return v

    @field_validator("measurement_ages")
    @classmethod
    def validate_ages(cls, v: List[float]) -> List[float]:
        """存储年龄非负，去重后升序"""
        if not v:
            raise ConfigurationError("measurement_ages 不能为空")
        if any(age < 0 for age in v):
            raise ConfigurationError("measurement_ages 不能为负数")
        return sorted(set(float(age) for age in v))

    @model_validator(mode="after")
    def validate_feasible(self) -> "WorkloadSpec":
        """目标占用空间至少能放下两个最大对象"""
        budget = self.target_occupancy * self.volume_capacity_bytes
        if budget < 2 * self.size_dist.upper_bytes:
            raise ConfigurationError(
                f"占用率不可行: {self.target_occupancy} × {self.volume_capacity_bytes} "
                f"放不下两个 {self.size_dist.upper_bytes} 字节的对象"
            )
        return self

    def age_targets(self) -> List[Fraction]:
        """以精确有理数返回测量年龄"""
        return [Fraction(str(age)) for age in self.measurement_ages]

    @property
    def occupancy_budget_bytes(self) -> int:
        """批量加载阶段允许使用的字节数"""
        return int(Fraction(str(self.target_occupancy)) * self.volume_capacity_bytes)


class VolumeGeometry(BaseModel):
    """卷镜像几何参数"""

    capacity_bytes: int = Field(..., gt=0, description="数据区容量")
    cluster_bytes: int = Field(default=4096, gt=0, description="extent 后端分配粒度")
    page_bytes: int = Field(default=8192, gt=0, description="page 后端页大小")
    page_header_bytes: int = Field(default=96, description="每页页头字节数")
    metadata_bytes: Optional[int] = Field(default=None, description="元数据区字节数")

    @model_validator(mode="after")
    def validate_geometry(self) -> "VolumeGeometry":
        """容量必须同时是簇和页的整数倍；页内可用字节必须满足标记对齐"""
        for name, granule in (("cluster_bytes", self.cluster_bytes), ("page_bytes", self.page_bytes)):
            if self.capacity_bytes % granule != 0:
                raise ConfigurationError(
                    f"capacity_bytes={self.capacity_bytes} 不是 {name}={granule} 的整数倍"
                )
        if self.cluster_bytes % MARKER_INTERVAL != 0:
            raise ConfigurationError("cluster_bytes 必须是 1024 的整数倍")
        if self.page_header_bytes < MIN_PAGE_HEADER_BYTES:
            raise ConfigurationError(f"page_header_bytes 不能小于 {MIN_PAGE_HEADER_BYTES}")
        usable = self.page_bytes - self.page_header_bytes
        # 可用字节是 32 的倍数时，24 字节的标记永远不会跨页
        if usable < MARKER_INTERVAL or usable % 32 != 0:
            raise ConfigurationError(
                f"页内可用字节 {usable} 必须 ≥ {MARKER_INTERVAL} 且为 32 的倍数"
            )
        if self.metadata_bytes is not None and self.metadata_bytes % 65536 != 0:
            raise ConfigurationError("metadata_bytes 必须是 64KB 的整数倍")
        return self

    @property
    def page_usable_bytes(self) -> int:
        """每页可用于存放对象数据的字节数"""
        return self.page_bytes - self.page_header_bytes

    @property
    def resolved_metadata_bytes(self) -> int:
        """元数据区大小，未指定时按容量的 1/64 取整，最少 1MB"""
        if self.metadata_bytes is not None:
            return self.metadata_bytes
        size = max(1024 * 1024, self.capacity_bytes // 64)
        return -(-size // 65536) * 65536


class DiskModel(BaseModel):
    """用于确定性计时的磁盘代价模型"""

    seek_ms: float = Field(default=8.0, ge=0.0, description="每次寻道耗时（毫秒）")
    transfer_mb_s: float = Field(default=60.0, gt=0.0, description="顺序传输速率（MB/s）")

    def elapsed(self, num_bytes: int, seeks: int) -> float:
        """按寻道次数与传输字节数估算耗时（秒）"""
        return seeks * self.seek_ms / 1000.0 + num_bytes / (self.transfer_mb_s * 1024 * 1024)


# 扁平格式中属于工作负载的键
WORKLOAD_KEYS = (
    "seed",
    "size_kind",
    "size_mean_bytes",
    "size_spread",
    "volume_capacity_bytes",
    "target_occupancy",
    "write_buffer_bytes",
    "measurement_ages",
    "read_sample_count",
    "churn_mix",
)


def workload_to_flat(spec: WorkloadSpec) -> Dict[str, Any]:
    """
    将 WorkloadSpec 展开为扁平键值映射

    Args:
        spec: 工作负载

    Returns:
        键为 WORKLOAD_KEYS 的字典
    """
    return {
        "seed": spec.seed,
        "size_kind": spec.size_dist.kind,
        "size_mean_bytes": spec.size_dist.mean_bytes,
        "size_spread": spec.size_dist.spread,
        "volume_capacity_bytes": spec.volume_capacity_bytes,
        "target_occupancy": spec.target_occupancy,
        "write_buffer_bytes": spec.write_buffer_bytes,
        "measurement_ages": list(spec.measurement_ages),
        "read_sample_count": spec.read_sample_count,
        "churn_mix": spec.churn_mix,
    }


def workload_from_flat(data: Dict[str, Any]) -> WorkloadSpec:
    """
    从扁平键值映射构造 WorkloadSpec

    Args:
        data: 至少包含 size_mean_bytes 与 volume_capacity_bytes

    Returns:
        WorkloadSpec

    Raises:
        ConfigurationError: 配置验证失败
    """
    unknown = set(data) - set(WORKLOAD_KEYS)
    if unknown:
        raise ConfigurationError(f"未知的工作负载键: {sorted(unknown)}")
    size = {"kind": data.get("size_kind", "constant"), "mean_bytes": data.get("size_mean_bytes")}
    if "size_spread" in data:
        size["spread"] = data["size_spread"]
    fields = {k: v for k, v in data.items() if not k.startswith("size_")}
    return build_model(WorkloadSpec, {"size_dist": build_model(SizeDistribution, size), **fields})


def save_workload(spec: WorkloadSpec, path: Path) -> Path:
    """把工作负载写成扁平 YAML 文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(workload_to_flat(spec), f, sort_keys=False)
    return path


def load_workload(path: Path) -> WorkloadSpec:
    """读取扁平 YAML 格式的工作负载文件"""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return workload_from_flat(data)


class CellConfig(BaseModel):
    """实验矩阵中的一个单元：后端 + 工作负载"""

    name: str = Field(..., min_length=1, description="单元名称（结果子目录名）")
    backend: Literal["fs", "extent", "page"] = Field(..., description="存储后端")
    workload: WorkloadSpec
    cluster_bytes: int = Field(default=4096, gt=0)
    page_bytes: int = Field(default=8192, gt=0)
    page_header_bytes: int = Field(default=96)
    metadata_bytes: Optional[int] = Field(default=None)
    fit_policy: Literal["smallest_fit", "largest_first"] = Field(
        default="smallest_fit", description="extent 后端在足够大的空闲游程中的选择策略"
    )
    shatter_stride_bytes: Optional[int] = Field(
        default=None, gt=0, description="批量加载前每隔多少字节钉住一个簇（病态初始碎片）"
    )
    fsync_policy: Literal["flush_before_rename", "no_flush"] = Field(default="flush_before_rename")
    commit_interval: Optional[int] = Field(
        default=None, ge=1, description="每多少次追加请求提交一次释放的空间，空表示按容量计算"
    )
    gap_allowance: int = Field(default=512, ge=0, description="扫描器允许的页头间隙")
    image_path: Optional[str] = Field(default=None, description="卷镜像文件，空表示内存镜像")

    @model_validator(mode="before")
    @classmethod
    def collect_workload(cls, data: Any) -> Any:
        """允许把工作负载键直接写在单元映射里"""
        if isinstance(data, dict) and "workload" not in data:
            data = dict(data)
            flat = {k: data.pop(k) for k in WORKLOAD_KEYS if k in data}
            data["workload"] = workload_from_flat(flat)
        return data

    @model_validator(mode="after")
    def validate_gap(self) -> "CellConfig":
        """间隙容差必须吸收页头，但不能吸收真实的簇级断点"""
        if not (self.page_header_bytes <= self.gap_allowance < self.cluster_bytes):
            raise ConfigurationError(
                f"gap_allowance={self.gap_allowance} 必须满足 "
                f"page_header_bytes({self.page_header_bytes}) ≤ gap < cluster_bytes({self.cluster_bytes})"
            )
        return self

    @field_validator("name")
    @classmethod
    def validate_name(cls, v: str) -> str:
        """名称用作目录名，不能包含路径分隔符"""
        if "/" in v or "\\" in v or v in (".", ".."):
            raise ConfigurationError(f"单元名称不能作为目录名: {v!r}")
        return v

    @property
    def geometry(self) -> VolumeGeometry:
        """由单元参数构造卷几何"""
        return VolumeGeometry(
            capacity_bytes=self.workload.volume_capacity_bytes,
            cluster_bytes=self.cluster_bytes,
            page_bytes=self.page_bytes,
            page_header_bytes=self.page_header_bytes,
            metadata_bytes=self.metadata_bytes,
        )


class ExperimentConfig(BaseModel):
    """完整实验配置"""

    results_dir: str = Field(default="results", description="结果目录")
    timing: Literal["modeled", "wall"] = Field(
        default="modeled", description="phases.csv 中耗时的来源"
    )
    disk: DiskModel = Field(default_factory=DiskModel)
    scan_workers: int = Field(default=1, ge=1, description="扫描线程数")
    cells: List[CellConfig] = Field(..., min_length=1)

    @field_validator("cells")
    @classmethod
    def validate_unique_names(cls, v: List[CellConfig]) -> List[CellConfig]:
        """单元名称不能重复"""
        names = [cell.name for cell in v]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ConfigurationError(f"单元名称重复: {duplicates}")
        return v


# 默认实验配置模板（1GB 卷、10MB 定长对象、两个模拟后端）
DEFAULT_EXPERIMENT_TEMPLATE = """# blobbench 实验配置
# 首次运行自动生成，请根据需要修改

results_dir: "results"          # 结果目录（环境变量 BLOBBENCH_RESULTS 优先）
timing: "modeled"               # modeled: 按寻道模型计时（可复现）；wall: 墙钟时间
disk:
  seek_ms: 8.0                  # 每次寻道耗时
  transfer_mb_s: 60.0           # 顺序传输速率
scan_workers: 1

cells:
  - name: "extent-10mb"
    backend: "extent"
    seed: 42
    size_kind: "constant"
    size_mean_bytes: 10485760       # 10MB
    volume_capacity_bytes: 1073741824  # 1GB
    target_occupancy: 0.9
    write_buffer_bytes: 65536
    measurement_ages: [0, 2, 4]
    read_sample_count: 200
  - name: "page-10mb"
    backend: "page"
    seed: 42
    size_kind: "constant"
    size_mean_bytes: 10485760
    volume_capacity_bytes: 1073741824
    target_occupancy: 0.9
    write_buffer_bytes: 65536
    measurement_ages: [0, 2, 4]
    read_sample_count: 200
"""


def get_default_config_path() -> Path:
    """
    获取默认实验配置文件路径

    Returns:
        Path: ~/.blobbench/experiment.yaml
    """
    return Path.home() / ".blobbench" / "experiment.yaml"


def create_default_config(config_path: Optional[Path] = None) -> Path:
    """
    创建默认实验配置文件

    Args:
        config_path: 配置文件路径，默认为 ~/.blobbench/experiment.yaml

    Returns:
        Path: 创建的配置文件路径
    """
    if config_path is None:
        config_path = get_default_config_path()

    config_path.parent.mkdir(parents=True, exist_ok=True)

    with open(config_path, "w", encoding="utf-8") as f:
        f.write(DEFAULT_EXPERIMENT_TEMPLATE)

    return config_path


def load_experiment(config_path: Optional[str] = None) -> ExperimentConfig:
    """
    加载实验配置文件

    未指定路径时使用 ~/.blobbench/experiment.yaml，首次运行会自动创建。
    环境变量 BLOBBENCH_RESULTS 覆盖 results_dir。

    Args:
        config_path: 配置文件路径

    Returns:
        ExperimentConfig: 配置对象

    Raises:
        ConfigurationError: 配置验证失败
        FileNotFoundError: 显式指定的配置文件不存在
    """
    if config_path is None:
        path = get_default_config_path()
        if not path.exists():
            path = create_default_config(path)
            print(f"首次运行，已创建默认实验配置文件: {path}")
    else:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"配置文件不存在: {path}")

    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}

    config = build_model(ExperimentConfig, data)

    override = os.environ.get(RESULTS_ENV_VAR)
    if override:
        config.results_dir = override

    # 展开路径（~ -> 绝对路径）
    config.results_dir = str(Path(config.results_dir).expanduser().absolute())

    return config
