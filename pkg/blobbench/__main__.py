"""程序入口

运行方式：
    python -m blobbench <subcommand>
"""

import sys

from blobbench.cli import run

if __name__ == "__main__":
    sys.exit(run())
