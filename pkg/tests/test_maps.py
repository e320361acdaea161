"""src/maps.py のテスト."""

import numpy as np
import pytest

from src.config import ConfigError
from src.maps import (
    MapShapeError,
    build_convergence_map,
    build_mistake_map,
    build_sample_image,
    grid_shape,
    read_pgm,
    render_sample_maps,
    scale_linear,
    scale_log,
    write_pgm,
)


class TestGridShape:
    """grid_shape のテストケース."""

    def test_square(self):
        """平方数の長さは正方形になる."""
        assert grid_shape(196) == (14, 14, 1)

    def test_explicit_shape(self):
        """明示した形はそのまま使い、2 次元ならチャネル 1 を補う."""
        assert grid_shape(8, [2, 4]) == (2, 4, 1)
        assert grid_shape(12, [2, 2, 3]) == (2, 2, 3)

    def test_not_square(self):
        """平方数でない長さで形の指定がなければ設定エラーになる."""
        with pytest.raises(MapShapeError) as excinfo:
            grid_shape(8)
        assert isinstance(excinfo.value, ConfigError)
        assert excinfo.value.field == "maps.shape"

    def test_shape_must_cover_length(self):
        """画素数が長さと合わない形は使えない."""
        with pytest.raises(MapShapeError):
            grid_shape(8, [3, 3])


class TestBuildMaps:
    """マップの組み立てとスケーリングのテストケース."""

    def test_baseline_convergence_encodes_position(self):
        """祖先サンプリングの収束マップは画素 i に i + 1 が入る."""
        convergence = np.arange(1, 17)
        grid = build_convergence_map(convergence, (4, 4, 1))
        assert np.array_equal(grid, np.arange(1, 17).reshape(4, 4))

    def test_no_mistakes_is_black(self):
        """予測ミスがなければ真っ黒の画像になる."""
        image = scale_linear(build_mistake_map(np.zeros(9, dtype=np.int64), (3, 3, 1)))
        assert image.dtype == np.uint8
        assert not np.any(image)

    def test_linear_scaling(self):
        """最大値が 255 になる."""
        image = scale_linear(np.array([[0, 1], [2, 4]]))
        assert np.array_equal(image, [[0, 64], [128, 255]])

    def test_log_scaling_monotone(self):
        """対数スケーリングは単調で、最大値が 255."""
        image = scale_log(np.arange(0, 50, dtype=np.float64).reshape(5, 10))
        assert image.max() == 255
        assert image.min() == 0
        assert np.all(np.diff(image.ravel().astype(int)) >= 0)

    def test_multichannel_aggregation(self):
        """ミスはチャネルの合計、収束はチャネル平均になる."""
        mistakes = np.array([1, 0, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0])
        convergence = np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12])
        assert np.array_equal(build_mistake_map(mistakes, (2, 2, 3)), [[2, 0], [3, 0]])
        assert np.array_equal(build_convergence_map(convergence, (2, 2, 3)), [[2.0, 5.0], [8.0, 11.0]])

    def test_sample_image(self):
        """サンプルは 0..K−1 を 0..255 に伸ばす."""
        image = build_sample_image(np.array([0, 1, 2, 3]), 4, (2, 2, 1))
        assert np.array_equal(image, [[0, 85], [170, 255]])


class TestPgm:
    """PGM の読み書きのテストケース."""

    def test_round_trip_and_header(self, tmp_path):
        """ヘッダは P5 形式で、画素はそのまま戻る."""
        image = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
        path = tmp_path / "x.pgm"
        write_pgm(path, image)
        assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
        assert np.array_equal(read_pgm(path), image)

    def test_rejects_non_2d(self, tmp_path):
        """2 次元以外の画像は書けない."""
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))

    def test_render_writes_three_files(self, tmp_path):
        """サンプル・ミス・収束の 3 枚を書き出す."""
        paths = render_sample_maps(
            tmp_path,
            "fpi_s0_0",
            np.array([0, 1, 1, 0]),
            2,
            np.array([1, 0, 0, 0]),
            np.array([1, 2, 2, 2]),
            (2, 2, 1),
        )
        assert [p.name for p in paths] == ["fpi_s0_0_sample.pgm", "fpi_s0_0_mistakes.pgm", "fpi_s0_0_convergence.pgm"]
        assert np.array_equal(read_pgm(paths[0]), [[0, 255], [255, 0]])
        assert np.array_equal(read_pgm(paths[1]), [[255, 0], [0, 0]])
