#!/usr/bin/env python3
"""予測サンプリングのエントリポイント.

学習 → ベンチマーク → マップ → アブレーションの順に実行する想定。
各コマンドは同じ出力ディレクトリ（output.dir）を読み書きする。

使用例:
    python scripts/psample.py train
    python scripts/psample.py bench --bench.batch_sizes="[1, 32]"
    python scripts/psample.py --config configs/bars.yaml maps
    python scripts/psample.py ablate --ablate.horizon_sweep="[1, 5]"
    python scripts/psample.py verify --verify.cases=200
"""

import sys
import logging
from pathlib import Path

# プロジェクトルートを sys.path に追加する（スクリプトとして直接実行するため）
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from src.cli import main


def _setup_logging() -> None:
    """ロギングを設定する.

    コンソール出力と logs/psample.log への追記を行う。
    """
    log_dir = PROJECT_ROOT / "logs"
    log_dir.mkdir(exist_ok=True)

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(log_dir / "psample.log", encoding="utf-8"),
        ],
    )


if __name__ == "__main__":
    _setup_logging()
    sys.exit(main())
