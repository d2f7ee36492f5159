#!/usr/bin/env python
"""blobbench 构建脚本

运行测试后把命令行工具打包为独立可执行文件。

使用方法：
    python build.py               # 快速测试 + 打包
    python build.py --with-slow   # 先跑验收规模测试
    python build.py --skip-tests

输出目录：
    dist/blobbench/
"""

import argparse
import platform
import shutil
import subprocess
import sys
from pathlib import Path

ENTRY = Path("blobbench") / "__main__.py"
DIST = Path("dist") / "blobbench"

# matplotlib 按名字动态加载后端，PyInstaller 扫描不到
HIDDEN_IMPORTS = ("matplotlib.backends.backend_agg", "matplotlib.backends.backend_svg")


def check_pyinstaller() -> bool:
    """检查 PyInstaller，缺失时用 pip 安装"""
    try:
        import PyInstaller
        print(f"✓ PyInstaller {PyInstaller.__version__} 已安装")
        return True
    except ImportError:
        print("✗ PyInstaller 未安装，正在安装...")
        result = subprocess.run([sys.executable, "-m", "pip", "install", "pyinstaller"])
        return result.returncode == 0


def clean_build():
    """删除上次的 build/ 与 dist/"""
    print("\n[1/4] 清理构建目录...")
    for dir_name in ("build", "dist"):
        if Path(dir_name).exists():
            print(f"  删除 {dir_name}/")
            shutil.rmtree(dir_name)


def run_tests(with_slow: bool) -> bool:
    """
    运行测试

    Args:
        with_slow: 是否包含 slow 标记的验收测试（上百个种子，耗时数分钟）

    Returns:
        全部通过时返回 True
    """
    print("\n[2/4] 运行测试...")
    command = [sys.executable, "-m", "pytest", "tests/", "-q"]
    if with_slow:
        command += ["-m", "slow or not slow"]
    result = subprocess.run(command, capture_output=True, text=True)
    if result.returncode == 0:
        print(f"✓ 测试通过: {result.stdout.strip().splitlines()[-1]}")
        return True
    print("✗ 测试失败")
    print(result.stdout)
    print(result.stderr)
    return False


def build_executable() -> bool:
    """用 PyInstaller 打包 blobbench/__main__.py"""
    print("\n[3/4] 构建可执行文件...")
    print(f"  平台: {platform.system()} {platform.machine()}")

    command = [
        sys.executable, "-m", "PyInstaller",
        "--name", "blobbench",
        "--onedir",
        "--clean",
        "--noconfirm",
    ]
    for module in HIDDEN_IMPORTS:
        command += ["--hidden-import", module]
    command.append(str(ENTRY))

    result = subprocess.run(command, capture_output=True, text=True)
    if result.returncode != 0:
        print("✗ 构建失败")
        print(result.stdout)
        print(result.stderr)
        return False
    print("✓ 构建完成")
    return True


def write_release_notes():
    """在 dist/blobbench/ 写一份简短的使用说明"""
    print("\n[4/4] 写入使用说明...")
    exe = "blobbench.exe" if platform.system() == "Windows" else "./blobbench"
    notes = f"""# blobbench

存储老化基准与碎片扫描工具（{platform.system()} {platform.machine()}，Python {sys.version.split()[0]}）

    {exe} bench                      运行实验矩阵（首次运行生成 ~/.blobbench/experiment.yaml）
    {exe} report --in results        生成 SVG 图表
    {exe} init --image v.img --backend page
    {exe} scan --image v.img --out scan
    {exe} defrag --image v.img --backend page
    {exe} crashtest --seeds 250      安全写崩溃注入矩阵

日志: ~/.blobbench/logs/bench.log
"""
    path = DIST / "README.txt"
    path.write_text(notes, encoding="utf-8")
    print(f"✓ 创建 {path}")


def main():
    parser = argparse.ArgumentParser(description="blobbench 构建工具")
    parser.add_argument("--skip-tests", action="store_true", help="跳过测试直接打包")
    parser.add_argument("--with-slow", action="store_true", help="同时运行验收规模测试")
    args = parser.parse_args()

    print("=" * 60)
    print("  blobbench 构建工具")
    print("=" * 60)

    if not check_pyinstaller():
        print("\n✗ 构建失败: 无法安装 PyInstaller")
        sys.exit(1)

    clean_build()

    if not args.skip_tests and not run_tests(args.with_slow):
        response = input("\n测试失败，是否继续构建？(y/N): ")
        if response.lower() != "y":
            print("✗ 构建已取消")
            sys.exit(1)

    if not build_executable():
        sys.exit(1)

    write_release_notes()

    print("\n" + "=" * 60)
    print(f"  构建完成: {DIST}/")
    print("=" * 60)


if __name__ == "__main__":
    main()
