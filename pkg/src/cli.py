"""コマンドライン引数の解釈とサブコマンドの振り分け.

サブコマンド: train, bench, maps, ablate, verify。
設定は --config で指定したファイル（省略時は PS_CONFIG_PATH または config.yaml）に、
--section.key=value 形式の上書きを重ねたもの。

終了コード: 0 成功, 1 一致検証の失敗または学習の発散, 2 使い方・設定・入力データの誤り。
"""

from __future__ import annotations

import argparse
import logging
import re
import sys

from src.artifacts import ArtifactFormatError
from src.bench import cmd_ablate, cmd_bench, cmd_maps, cmd_train, cmd_verify
from src.config import ConfigError, apply_overrides, load_config, validate_config
from src.datasets import DatasetError
from src.sampler import SamplerError
from src.training import TrainingDivergedError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_OVERRIDE = re.compile(r"^--([a-z_][a-z0-9_]*\.[a-z_][a-z0-9_]*)=(.*)$")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psample",
        description="離散自己回帰モデルの予測サンプリング（学習・ベンチマーク・検証）",
        epilog="設定の上書きは --section.key=value 形式（例: --training.steps=100）",
    )
    parser.add_argument("--config", default=None, help="設定ファイル（YAML / JSON）のパス")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="ARM と予測モジュールを学習してチェックポイントを書く")
    sub.add_parser("bench", help="戦略ごとの ARM 呼び出し割合を測る")
    sub.add_parser("maps", help="予測ミスマップと収束マップを PGM で書く")
    sub.add_parser("ablate", help="再パラメータ化と表現共有のアブレーション")
    sub.add_parser("verify", help="祖先サンプルとの一致を検証する")
    return parser


def parse_args(argv: list[str]) -> tuple[argparse.Namespace, list[str]]:
    """引数を解釈し、(名前空間, "section.key=value" のリスト) を返す.

    上書き以外の未知の引数は使い方の誤りとして終了コード 2 で終わる。
    """
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    overrides = []
    for item in rest:
        match = _OVERRIDE.match(item)
        if match is None:
            parser.error(f"認識できない引数: {item}（--section.key=value 形式で指定する）")
        overrides.append(f"{match.group(1)}={match.group(2)}")
    return args, overrides


COMMANDS = {
    "train": cmd_train,
    "bench": cmd_bench,
    "maps": cmd_maps,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    """CLI のエントリポイント. 終了コードを返す."""
    args, overrides = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        config = apply_overrides(load_config(args.config), overrides)
        validate_config(config)
        result = COMMANDS[args.command](config)
    except ConfigError as e:
        logger.error("設定エラー: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ArtifactFormatError as e:
        logger.error("成果物の読み込みに失敗した: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as e:
        logger.error("データセットを構築できない: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SamplerError as e:
        logger.error("検証に失敗した: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except TrainingDivergedError as e:
        logger.error("学習が発散した: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE

    if isinstance(result, list) and all(isinstance(line, str) for line in result):
        print("\n".join(result))
    logger.info("%s が完了した", args.command)
    return EXIT_OK
