"""データセットの読み込みと合成.

IDX 形式（MNIST）の画像・ラベルの読み書き、縮小と量子化によるトークン化、
構造が解析的にわかる合成データ（パリティ系列、縦横バー画像）、分割を提供する。
画像はラスタ順（行 → 列 → チャネル）に平坦化する。
"""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.arm import TokenBuffer
from src.numeric import Rng

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DatasetError(Exception):
    """データセットの構築に失敗した場合の基底例外."""


class IdxFormatError(DatasetError):
    """IDX ファイルの形式が不正な場合の例外."""


@dataclass(frozen=True)
class Dataset:
    """同じ (d, K) を持つ確定済み系列の集合.

    tokens は (n, d) の整数配列。shape は画像由来のときの (高さ, 幅[, チャネル])。
    """

    name: str
    K: int
    tokens: np.ndarray
    split: str = "all"
    shape: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DatasetError(f"tokens must be (n, d), got shape {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.K):
            raise DatasetError(f"{self.name}: token outside [0, {self.K})")
        object.__setattr__(self, "tokens", tokens)

    @property
    def d(self) -> int:
        return int(self.tokens.shape[1])

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def items(self) -> list[TokenBuffer]:
        return [TokenBuffer.full(row, self.K) for row in self.tokens]

    def subset(self, indices: np.ndarray, split: str) -> "Dataset":
        return Dataset(self.name, self.K, self.tokens[indices], split, self.shape)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(data: bytes, expected_magic: int, ndim: int) -> np.ndarray:
    if len(data) < 4:
        raise IdxFormatError(f"short read at byte {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"not an IDX file (magic 0x{magic:08x}, expected 0x{expected_magic:08x})")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"short read at byte {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = math.prod(dims)
    if len(data) < header + size:
        raise IdxFormatError(f"short read at byte {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def load_idx(path: str | Path) -> np.ndarray:
    """IDX 画像ファイル（.gz 可）を (枚数, 行, 列) の uint8 配列として読む.

    Raises:
        IdxFormatError: マジックナンバーが違う、またはデータが途中で切れている場合
    """
    path = Path(path)
    images = _parse_idx(_read_bytes(path), IDX_IMAGE_MAGIC, 3)
    logger.info("IDX 画像を読み込んだ: %s (%d 枚, %dx%d)", path, *images.shape)
    return images


def load_idx_labels(path: str | Path) -> np.ndarray:
    """IDX ラベルファイル（.gz 可）を読む."""
    return _parse_idx(_read_bytes(Path(path)), IDX_LABEL_MAGIC, 1)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """uint8 配列を IDX 形式で書き出す（3 次元は画像、1 次元はラベル）."""
    array = np.asarray(array, dtype=np.uint8)
    if array.ndim == 3:
        magic = IDX_IMAGE_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABEL_MAGIC
    else:
        raise IdxFormatError(f"IDX writer supports 1-D or 3-D arrays, got {array.ndim}-D")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def downsample(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """factor × factor の平均プーリングで縮小する（四捨五入, uint8 のまま）."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    if h % factor or w % factor:
        raise DatasetError(f"image size {h}x{w} is not divisible by {factor}")
    blocks = images.reshape(n, h // factor, factor, w // factor, factor, *images.shape[3:])
    total = blocks.astype(np.int64).sum(axis=(2, 4))
    area = factor * factor
    return ((total + area // 2) // area).astype(np.uint8)


def quantize(images: np.ndarray, bits: int, name: str = "idx") -> Dataset:
    """8bit 画素を上位 bits ビットに量子化し、K = 2^bits のデータセットにする.

    token = floor(pixel / 2^(8 − bits))。bits = 1 は 128 での固定しきい値。
    多チャネル画像はチャネル最後の順で平坦化する。
    """
    if not 1 <= bits <= 8:
        raise DatasetError(f"bits must be in 1..8, got {bits}")
    images = np.asarray(images, dtype=np.uint8)
    tokens = (images >> (8 - bits)).reshape(images.shape[0], -1)
    return Dataset(name, 2**bits, tokens, "all", tuple(images.shape[1:]))


def synth_parity(n: int, d: int, rng: Rng, flip_prob: float = 0.05) -> Dataset:
    """パリティ系列: x_0 は一様、x_i = x_{i−1} XOR 1 を確率 flip_prob で反転."""
    if d < 2:
        raise DatasetError(f"parity sequences need d >= 2, got {d}")
    first = rng.integers(0, 2, size=n)
    flips = (rng.random((n, d - 1)) < flip_prob).astype(np.int64)
    steps = 1 ^ flips
    # 累積 XOR は累積和の偶奇に等しい
    tokens = (first[:, None] + np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(steps, axis=1)], axis=1)) % 2
    return Dataset("parity", 2, tokens)


def binary_entropy(p: float) -> float:
    """2 値エントロピー（bits）."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log2(p) + (1.0 - p) * math.log2(1.0 - p))


def parity_entropy_bpd(d: int, flip_prob: float) -> float:
    """パリティ生成過程の真の bpd = (1 + (d−1)·H(flip_prob)) / d."""
    return (1.0 + (d - 1) * binary_entropy(flip_prob)) / d


def synth_bars(n: int, side: int, rng: Rng, prob: float = 0.2) -> Dataset:
    """縦横のバー画像: 各行・各列が独立に確率 prob で点灯し、その和集合を画像とする."""
    if side < 2:
        raise DatasetError(f"bars images need side >= 2, got {side}")
    rows = rng.random((n, side)) < prob
    cols = rng.random((n, side)) < prob
    images = rows[:, :, None] | cols[:, None, :]
    return Dataset("bars", 2, images.reshape(n, side * side).astype(np.int64), "all", (side, side))


def split(dataset: Dataset, fractions: tuple[float, float, float] | list[float], rng: Rng) -> tuple[Dataset, Dataset, Dataset]:
    """シードで決まるシャッフルの後、train / validation / test に連続分割する.

    Raises:
        DatasetError: 比率の合計が 1 でない、または正の比率の分割が空になる場合
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    order = rng.permutation(n)
    n_train = min(n, round(fractions[0] * n))
    n_val = min(n - n_train, round(fractions[1] * n))
    bounds = [0, n_train, n_train + n_val, n]
    parts = []
    for name, fraction, lo, hi in zip(("train", "validation", "test"), fractions, bounds[:-1], bounds[1:]):
        if fraction > 0 and hi == lo:
            raise DatasetError(f"empty split: {name}")
        parts.append(dataset.subset(order[lo:hi], name))
    logger.info("データを分割した: train=%d validation=%d test=%d", *(len(p) for p in parts))
    return parts[0], parts[1], parts[2]
