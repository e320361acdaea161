"""src/config.py のテスト."""

import copy
import json

import pytest

from src.config import (
    DEFAULT_CONFIG,
    PROJECT_ROOT,
    ConfigError,
    _deep_merge,
    apply_overrides,
    get_output_dir,
    load_config,
    validate_config,
)


@pytest.fixture
def config():
    """テスト用設定を返す."""
    return load_config()


class TestLoadConfig:
    """load_config のテストケース."""

    def test_missing_file_gives_defaults(self, tmp_path):
        """ファイルがなければデフォルト値を返す."""
        assert load_config(tmp_path / "none.yaml") == DEFAULT_CONFIG

    def test_partial_file_is_merged(self, tmp_path):
        """一部のキーだけを書いたファイルはデフォルトとマージされる."""
        path = tmp_path / "c.yaml"
        path.write_text("training:\n  steps: 7\n", encoding="utf-8")
        config = load_config(path)
        assert config["training"]["steps"] == 7
        assert config["training"]["lr"] == DEFAULT_CONFIG["training"]["lr"]
        assert config["model"] == DEFAULT_CONFIG["model"]

    def test_json_file(self, tmp_path):
        """JSON で書いた設定も読める."""
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"dataset": {"kind": "bars"}}), encoding="utf-8")
        assert load_config(path)["dataset"]["kind"] == "bars"

    def test_environment_variable(self, tmp_path, monkeypatch):
        """PS_CONFIG_PATH で指定したファイルを読む."""
        path = tmp_path / "env.yaml"
        path.write_text("output:\n  dir: elsewhere\n", encoding="utf-8")
        monkeypatch.setenv("PS_CONFIG_PATH", str(path))
        assert load_config()["output"]["dir"] == "elsewhere"

    def test_invalid_yaml(self, tmp_path):
        """解析できないファイルは設定エラーになる."""
        path = tmp_path / "broken.yaml"
        path.write_text("training: [1, 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_non_mapping(self, tmp_path):
        """最上位がマッピングでなければ設定エラーになる."""
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_repository_config_is_valid(self, config):
        """同梱の config.yaml は検査を通る."""
        validate_config(config)

    def test_deep_merge_does_not_mutate(self):
        """マージは元の辞書を書き換えない."""
        base = {"a": {"b": 1, "c": 2}}
        merged = _deep_merge(base, {"a": {"b": 5}})
        assert merged == {"a": {"b": 5, "c": 2}}
        assert base == {"a": {"b": 1, "c": 2}}


class TestApplyOverrides:
    """apply_overrides のテストケース."""

    def test_values_are_parsed(self, config):
        """値は YAML として解釈され、元の設定は書き換えない."""
        before = copy.deepcopy(config)
        updated = apply_overrides(
            config,
            ["training.steps=10", "training.lr=0.5", "bench.batch_sizes=[1, 4]", "forecaster.enabled=false"],
        )
        assert updated["training"]["steps"] == 10
        assert updated["training"]["lr"] == 0.5
        assert updated["bench"]["batch_sizes"] == [1, 4]
        assert updated["forecaster"]["enabled"] is False
        assert config == before

    def test_unknown_key(self, config):
        """未知のキーは設定エラーになり、field にキー名が入る."""
        with pytest.raises(ConfigError) as excinfo:
            apply_overrides(config, ["training.stepz=1"])
        assert excinfo.value.field == "training.stepz"
        assert str(excinfo.value).startswith("--training.stepz:")

    def test_malformed(self, config):
        """= のない指定は設定エラーになる."""
        with pytest.raises(ConfigError):
            apply_overrides(config, ["training.steps"])


class TestValidateConfig:
    """validate_config のテストケース."""

    @pytest.mark.parametrize(
        "field,value",
        [
            ("dataset.kind", "cifar"),
            ("dataset.bits", 9),
            ("dataset.fractions", [0.5, 0.5, 0.5]),
            ("forecaster.horizon", 0),
            ("training.lr", 0.0),
            ("training.lr_decay", 1.5),
            ("bench.strategies", ["oracle"]),
            ("bench.batch_sizes", [0]),
            ("maps.strategies", ["oracle"]),
            ("ablate.horizon_sweep", [0]),
            ("ablate.hidden_sweep", [0]),
            ("dataset.bits", "abc"),
            ("dataset.n", 2.5),
            ("training.lr", "x"),
            ("dataset.fractions", [0.8, 0.1]),
            ("verify.categories", []),
        ],
    )
    def test_reports_field(self, config, field, value):
        """不正な値はキー名つきの設定エラーになる."""
        section, key = field.split(".")
        config[section][key] = value
        with pytest.raises(ConfigError) as excinfo:
            validate_config(config)
        assert excinfo.value.field == field


class TestGetOutputDir:
    """get_output_dir のテストケース."""

    def test_relative_is_under_project_root(self, config):
        """相対パスはプロジェクトルート基準になる."""
        config["output"]["dir"] = "runs/x"
        assert get_output_dir(config) == PROJECT_ROOT / "runs" / "x"

    def test_absolute_is_kept(self, config, tmp_path):
        """絶対パスはそのまま使う."""
        config["output"]["dir"] = str(tmp_path)
        assert get_output_dir(config) == tmp_path
