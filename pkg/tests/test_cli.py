"""src/cli.py のテスト."""

from unittest.mock import patch

import pytest
import yaml

from src.artifacts import ArtifactFormatError
from src.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main, parse_args
from src.datasets import DatasetError
from src.sampler import ExactnessError
from src.training import TrainingDivergedError


@pytest.fixture
def config_path(tmp_path):
    """小さな設定ファイルのパスを返す."""
    path = tmp_path / "config.yaml"
    settings = {
        "dataset": {"n": 60, "length": 4},
        "model": {"hidden": 4, "embed": 2, "layers": 1},
        "training": {"steps": 5, "eval_every": 5, "forecaster_steps": 5},
        "verify": {"cases": 5, "lengths": [4], "categories": [2]},
        "output": {"dir": str(tmp_path / "out")},
    }
    path.write_text(yaml.safe_dump(settings), encoding="utf-8")
    return path


class TestParseArgs:
    """parse_args のテストケース."""

    def test_overrides(self):
        """--section.key=value は上書き指定として集める."""
        args, overrides = parse_args(["--config", "c.yaml", "bench", "--training.steps=5", "--bench.batch_sizes=[1, 4]"])
        assert args.command == "bench"
        assert args.config == "c.yaml"
        assert overrides == ["training.steps=5", "bench.batch_sizes=[1, 4]"]

    def test_unknown_argument(self):
        """上書き形式でない未知の引数は使い方の誤り（終了コード 2）."""
        with pytest.raises(SystemExit) as excinfo:
            parse_args(["bench", "--fast"])
        assert excinfo.value.code == EXIT_USAGE

    def test_missing_command(self):
        """サブコマンドがなければ使い方の誤り."""
        with pytest.raises(SystemExit) as excinfo:
            parse_args([])
        assert excinfo.value.code == EXIT_USAGE


class TestMain:
    """main の終了コードのテストケース."""

    def test_verify_succeeds(self, config_path):
        """検証が通れば 0."""
        assert main(["--config", str(config_path), "verify"]) == EXIT_OK

    def test_train_then_bench(self, config_path, tmp_path, capsys):
        """train の後に bench を実行すると集計表を表示する."""
        assert main(["--config", str(config_path), "train"]) == EXIT_OK
        assert main(["--config", str(config_path), "bench", "--bench.seeds=[0]"]) == EXIT_OK
        assert "比較不可" in capsys.readouterr().out
        assert (tmp_path / "out" / "bench_runs.csv").exists()

    def test_bench_without_checkpoint(self, config_path, capsys):
        """チェックポイントがなければ 2 で、エラーにキー名を含める."""
        assert main(["--config", str(config_path), "bench"]) == EXIT_USAGE
        assert "--output.dir" in capsys.readouterr().err

    def test_missing_dataset_path(self, config_path, capsys):
        """idx でパスがなければ 2."""
        assert main(["--config", str(config_path), "train", "--dataset.kind=idx"]) == EXIT_USAGE
        assert "--dataset.path" in capsys.readouterr().err

    def test_invalid_value(self, config_path):
        """範囲外の設定値は 2."""
        assert main(["--config", str(config_path), "train", "--training.lr=0"]) == EXIT_USAGE

    def test_unknown_key(self, config_path):
        """未知の設定キーは 2."""
        assert main(["--config", str(config_path), "train", "--training.speed=1"]) == EXIT_USAGE

    def test_non_numeric_value(self, config_path, capsys):
        """数値の設定に文字列を渡すと 2 で、エラーにキー名を含める."""
        assert main(["--config", str(config_path), "train", "--dataset.bits=abc"]) == EXIT_USAGE
        assert "--dataset.bits" in capsys.readouterr().err

    def test_too_few_items(self, config_path, capsys):
        """分割が空になる件数は 2 で、エラーにキー名を含める."""
        assert main(["--config", str(config_path), "train", "--dataset.n=2"]) == EXIT_USAGE
        assert "--dataset.n" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "error,code",
        [
            (ExactnessError("fpi", 0, 3), EXIT_FAILURE),
            (TrainingDivergedError(7), EXIT_FAILURE),
            (ArtifactFormatError("bad magic"), EXIT_USAGE),
            (DatasetError("empty split: validation"), EXIT_USAGE),
        ],
    )
    def test_error_exit_codes(self, config_path, error, code):
        """一致検証の失敗・発散は 1、成果物・入力データの誤りは 2."""

        def failing(config):
            raise error

        with patch.dict("src.cli.COMMANDS", {"bench": failing}):
            assert main(["--config", str(config_path), "bench"]) == code

    def test_prints_lines(self, config_path, capsys):
        """コマンドが行のリストを返せば標準出力に表示する."""
        with patch.dict("src.cli.COMMANDS", {"ablate": lambda config: ["a", "b"]}):
            assert main(["--config", str(config_path), "ablate"]) == EXIT_OK
        assert capsys.readouterr().out == "a\nb\n"
