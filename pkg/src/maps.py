"""予測ミスマップと収束マップの生成.

系列を画像の形 (高さ, 幅[, チャネル]) に戻し、グレースケールのバイナリ PGM（P5）で書き出す。
多チャネルの場合、ミスマップは画素ごとに誤ったチャネル数の合計、
収束マップはチャネル平均をとる。
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from src.artifacts import ArtifactFormatError
from src.config import ConfigError

logger = logging.getLogger(__name__)


class MapShapeError(ConfigError):
    """系列長が画像の形に合わない場合の例外."""

    def __init__(self, message: str) -> None:
        super().__init__("maps.shape", message)


def grid_shape(d: int, shape: list[int] | tuple[int, ...] | None = None) -> tuple[int, int, int]:
    """系列長 d を (高さ, 幅, チャネル) に対応させる.

    shape 未指定なら d が平方数のときだけ正方形とみなす。
    """
    if shape:
        dims = tuple(int(s) for s in shape)
        if len(dims) == 2:
            dims = dims + (1,)
        if len(dims) != 3 or math.prod(dims) != d:
            raise MapShapeError(f"shape {list(shape)} does not cover d={d}")
        return dims  # type: ignore[return-value]
    side = math.isqrt(d)
    if side * side != d:
        raise MapShapeError(f"d={d} is not square; pass an explicit shape")
    return side, side, 1


def _to_grid(values: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    return np.asarray(values).reshape(shape)


def build_sample_image(tokens: np.ndarray, K: int, shape: tuple[int, int, int]) -> np.ndarray:
    """サンプルを 0..255 の画像にする（多チャネルはチャネル平均）."""
    grid = _to_grid(tokens, shape).astype(np.float64).mean(axis=2)
    if K <= 1:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.rint(grid * 255.0 / (K - 1)).astype(np.uint8)


def build_mistake_map(mistakes: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """位置ごとのミス数を画素ごとに合計した（スケール前の）マップ."""
    return _to_grid(mistakes, shape).sum(axis=2)


def build_convergence_map(convergence: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """位置ごとの収束反復をチャネル平均した（スケール前の）マップ."""
    return _to_grid(convergence, shape).astype(np.float64).mean(axis=2)


def scale_linear(values: np.ndarray) -> np.ndarray:
    """最大値を 255 とする線形スケーリング. 全 0 なら真っ黒."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(values * 255.0 / peak).astype(np.uint8)


def scale_log(values: np.ndarray) -> np.ndarray:
    """log(1 + v) による対数スケーリング."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(np.log1p(values) * 255.0 / math.log1p(peak)).astype(np.uint8)


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8bit グレースケール画像をバイナリ PGM（P5, maxval 255）で書く."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM images must be 2-D, got shape {image.shape}")
    height, width = image.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """write_pgm が書いた形式の PGM を読む."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ArtifactFormatError(f"{path}: not a binary PGM file")
    width, height = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ArtifactFormatError(f"{path}: unsupported maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height:
        raise ArtifactFormatError(f"{path}: expected {width * height} pixels, got {pixels.size}")
    return pixels.reshape(height, width).copy()


def render_sample_maps(
    out_dir: Path,
    prefix: str,
    tokens: np.ndarray,
    K: int,
    mistakes: np.ndarray,
    convergence: np.ndarray,
    shape: tuple[int, int, int],
) -> list[Path]:
    """サンプル・ミスマップ・収束マップ（対数スケール）の 3 枚を書き出す."""
    images = {
        "sample": build_sample_image(tokens, K, shape),
        "mistakes": scale_linear(build_mistake_map(mistakes, shape)),
        "convergence": scale_log(build_convergence_map(convergence, shape)),
    }
    paths = []
    for kind, image in images.items():
        path = out_dir / f"{prefix}_{kind}.pgm"
        write_pgm(path, image)
        paths.append(path)
    logger.info("マップを書き出した: %s_*.pgm", out_dir / prefix)
    return paths
