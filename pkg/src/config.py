"""設定ファイル（config.yaml）の読み込みとデフォルト値管理.

環境変数 PS_CONFIG_PATH でパスをオーバーライドできる。
ファイルが存在しない場合はデフォルト値を返す。
YAML は JSON の上位集合なので、JSON 形式の設定ファイルもそのまま読める。
"""

from __future__ import annotations

import os
import logging
from pathlib import Path
from copy import deepcopy

import yaml

logger = logging.getLogger(__name__)

# プロジェクトルートディレクトリ（src/ の親）
PROJECT_ROOT = Path(__file__).resolve().parent.parent

# 予測戦略の種類と、ベンチマークで指定できる戦略名
STRATEGY_KINDS = ("zeros", "predict-last", "fpi", "learned")
BENCH_STRATEGIES = ("baseline",) + STRATEGY_KINDS
DATASET_KINDS = ("parity", "bars", "idx", "cache")

# デフォルト設定値
# config.yaml が存在しない場合や、キーが欠落している場合に使用される
DEFAULT_CONFIG: dict = {
    "dataset": {
        "kind": "parity",
        "n": 2000,
        "length": 16,
        "flip_prob": 0.05,
        "side": 8,
        "bar_prob": 0.2,
        "path": None,
        "bits": 1,
        "full_resolution": False,
        "shape": None,
        "fractions": [0.8, 0.1, 0.1],
        "seed": 0,
    },
    "model": {
        "hidden": 64,
        "embed": 16,
        "layers": 4,
        "zero_output": True,
        "seed": 0,
    },
    "forecaster": {
        "enabled": True,
        "horizon": 1,
        "condition_on_last_token": False,
        "condition_on_noise": False,
    },
    "training": {
        "steps": 5000,
        "batch_size": 32,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 1e-6,
        "lr_decay": 1.0,
        "eval_every": 250,
        "eval_items": 256,
        "joint": True,
        "forecast_weight": 0.01,
        "forecaster_steps": 1000,
        "seed": 0,
    },
    "bench": {
        "strategies": ["baseline", "zeros", "predict-last", "fpi", "learned"],
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "batch_sizes": [1],
        "record_runs": True,
    },
    "maps": {
        "strategies": ["baseline", "fpi", "learned"],
        "seed": 0,
        "count": 4,
        "shape": None,
    },
    "ablate": {
        "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        "unshared_steps": 1000,
        "horizon_sweep": [],
        "hidden_sweep": [],
    },
    "verify": {
        "cases": 1000,
        "lengths": [8, 32, 64],
        "categories": [2, 4, 16],
        "hidden": 16,
        "embed": 8,
        "layers": 3,
        "seed": 0,
    },
    "output": {
        "dir": "runs/default",
    },
}


class ConfigError(Exception):
    """設定値が不正な場合の例外.

    field には問題のあるキーを "section.key" 形式で保持する。
    """

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"--{field}: {message}")
        self.field = field
        self.message = message


def _deep_merge(base: dict, override: dict) -> dict:
    """base の辞書に override を再帰的にマージする.

    override に存在するキーは base の値を上書きする。
    base にのみ存在するキーはそのまま保持される。

    Args:
        base: ベースとなる辞書（デフォルト値）
        override: 上書きする辞書（ユーザ設定）

    Returns:
        マージされた新しい辞書
    """
    merged = deepcopy(base)
    for key, value in override.items():
        if key in merged and isinstance(merged[key], dict) and isinstance(value, dict):
            # 両方が辞書の場合は再帰的にマージ
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = deepcopy(value)
    return merged


def load_config(path: str | Path | None = None) -> dict:
    """設定ファイルを読み込み、デフォルト値とマージして返す.

    読み込み優先順位:
    1. 引数 path が指定された場合はそのパス
    2. 環境変数 PS_CONFIG_PATH が設定されている場合はそのパス
    3. プロジェクトルートの config.yaml

    ファイルが存在しない場合はデフォルト値のみを返す。

    Args:
        path: 設定ファイルのパス（省略可）

    Returns:
        マージ済みの設定辞書
    """
    # 設定ファイルパスの決定
    if path is not None:
        config_path = Path(path)
    elif os.environ.get("PS_CONFIG_PATH"):
        config_path = Path(os.environ["PS_CONFIG_PATH"])
    else:
        config_path = PROJECT_ROOT / "config.yaml"

    if not config_path.exists():
        logger.warning(
            "設定ファイルが見つからない: %s（デフォルト値を使用する）", config_path
        )
        return deepcopy(DEFAULT_CONFIG)

    logger.info("設定ファイルを読み込む: %s", config_path)
    with open(config_path, "r", encoding="utf-8") as f:
        try:
            user_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError("config", f"設定ファイルを解析できない: {e}") from e
    if not isinstance(user_config, dict):
        raise ConfigError("config", "設定ファイルの最上位はマッピングである必要がある")
    return _deep_merge(DEFAULT_CONFIG, user_config)


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """"section.key=value" 形式の上書き指定を設定に反映する.

    値は YAML のスカラー / リストとして解釈する（"0.5" は float、"[1, 2]" はリスト）。
    DEFAULT_CONFIG に存在しないキーは誤記とみなしてエラーにする。

    Args:
        config: 設定辞書
        overrides: "section.key=value" 文字列のリスト

    Returns:
        上書き済みの新しい設定辞書

    Raises:
        ConfigError: 形式が不正、または未知のキーの場合
    """
    updated = deepcopy(config)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot or not section or not key:
            raise ConfigError(name or item, "section.key=value 形式で指定する")
        if section not in DEFAULT_CONFIG or key not in DEFAULT_CONFIG[section]:
            raise ConfigError(name, "未知の設定キー")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(name, f"値を解釈できない: {raw!r}") from e
        updated.setdefault(section, {})[key] = value
        logger.debug("設定を上書きする: %s = %r", name, value)
    return updated


def _require(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise ConfigError(field, message)


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _int(config: dict, section: str, key: str, minimum: int) -> int:
    """整数の設定値を取り出し、下限を検査する."""
    value = config[section][key]
    field = f"{section}.{key}"
    _require(_is_number(value) and float(value).is_integer(), field, f"整数ではない値: {value!r}")
    _require(int(value) >= minimum, field, f"{minimum} 以上を指定する")
    return int(value)


def _float(config: dict, section: str, key: str) -> float:
    """実数の設定値を取り出す. 範囲の検査は呼び出し側で行う."""
    value = config[section][key]
    _require(_is_number(value), f"{section}.{key}", f"数値ではない値: {value!r}")
    return float(value)


def _int_list(config: dict, section: str, key: str, minimum: int) -> list[int]:
    values = config[section][key]
    field = f"{section}.{key}"
    _require(isinstance(values, list) and len(values) > 0, field, "空でないリストを指定する")
    for v in values:
        _require(isinstance(v, int) and not isinstance(v, bool), field, f"整数ではない値: {v!r}")
        _require(v >= minimum, field, f"{minimum} 以上の値を指定する: {v}")
    return values


def validate_config(config: dict) -> None:
    """設定値の型と範囲を検査する.

    問題のあるキーは ConfigError の field に "section.key" 形式で入る。

    Raises:
        ConfigError: 不正な値が見つかった場合
    """
    ds = config["dataset"]
    _require(ds["kind"] in DATASET_KINDS, "dataset.kind", f"{DATASET_KINDS} のいずれかを指定する")
    bits = _int(config, "dataset", "bits", 1)
    _require(bits <= 8, "dataset.bits", "1〜8 の範囲で指定する")
    _int(config, "dataset", "length", 2)
    _int(config, "dataset", "side", 2)
    _int(config, "dataset", "n", 1)
    for key in ("flip_prob", "bar_prob"):
        _require(0.0 <= _float(config, "dataset", key) <= 1.0, f"dataset.{key}", "0〜1 の範囲で指定する")
    fractions = ds["fractions"]
    _require(
        isinstance(fractions, list) and len(fractions) == 3 and all(_is_number(f) for f in fractions),
        "dataset.fractions",
        "train/validation/test の 3 つの数値で指定する",
    )
    _require(
        abs(sum(float(f) for f in fractions) - 1.0) < 1e-9 and min(fractions) >= 0,
        "dataset.fractions",
        "非負で合計 1 になるように指定する",
    )

    for key in ("hidden", "embed", "layers"):
        _int(config, "model", key, 1)
    _int(config, "forecaster", "horizon", 1)

    _int(config, "training", "steps", 0)
    _int(config, "training", "batch_size", 1)
    _require(_float(config, "training", "lr") > 0, "training.lr", "正の値を指定する")
    _require(0.0 < _float(config, "training", "lr_decay") <= 1.0, "training.lr_decay", "(0, 1] の範囲で指定する")
    _int(config, "training", "eval_every", 1)
    _require(_float(config, "training", "forecast_weight") >= 0, "training.forecast_weight", "0 以上を指定する")
    _int(config, "training", "forecaster_steps", 0)

    strategies = config["bench"]["strategies"]
    _require(
        isinstance(strategies, list) and len(strategies) > 0,
        "bench.strategies",
        "空でないリストを指定する",
    )
    for name in strategies:
        _require(name in BENCH_STRATEGIES, "bench.strategies", f"未知の戦略: {name}")
    _int_list(config, "bench", "seeds", 0)
    _int_list(config, "bench", "batch_sizes", 1)

    for name in config["maps"]["strategies"]:
        _require(name in BENCH_STRATEGIES, "maps.strategies", f"未知の戦略: {name}")
    _int(config, "maps", "count", 1)

    _int_list(config, "ablate", "seeds", 0)
    _int(config, "ablate", "unshared_steps", 0)
    for key in ("horizon_sweep", "hidden_sweep"):
        for t in config["ablate"][key] or []:
            _require(isinstance(t, int) and not isinstance(t, bool) and t >= 1, f"ablate.{key}", f"1 以上の整数を指定する: {t!r}")

    _int(config, "verify", "cases", 1)
    _int_list(config, "verify", "lengths", 1)
    _int_list(config, "verify", "categories", 1)


def get_output_dir(config: dict | None = None) -> Path:
    """設定から出力ディレクトリの絶対パスを取得する.

    相対パスの場合はプロジェクトルートからの相対パスとして解決する。

    Args:
        config: 設定辞書（省略時は load_config() で読み込む）

    Returns:
        出力ディレクトリの絶対パス
    """
    if config is None:
        config = load_config()
    out_dir = Path(config["output"]["dir"])
    if not out_dir.is_absolute():
        out_dir = PROJECT_ROOT / out_dir
    return out_dir


def resolve_path(raw: str | Path) -> Path:
    """相対パスをプロジェクトルート基準で解決する."""
    path = Path(raw)
    if not path.is_absolute():
        path = PROJECT_ROOT / path
    return path
