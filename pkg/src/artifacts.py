"""バイナリ成果物の保存と読み込み.

すべてリトルエンディアン、実数は 64bit。各形式は 4 バイトのマジックとバージョンで始まる。

- PSNG: ノイズ格子     ヘッダ <4sIII (magic, version, d, K) + d×K 実数
- PSAM: モデル         ヘッダ <4sIIIIII (magic, version, d, K, H, E, L) + パラメータ（ArmModel.param_names 順）
- PSFC: 予測モジュール  PSAM の後ろに追記. <4sII (magic, T, flags) + パラメータ（head1.w, head1.b, ...）
- PSRN: 実行記録       ヘッダ <4sIQIIIIII + トークン列（u32 × d）
- PSDS: データセット   ヘッダ <4sIIII (magic, version, d, K, n) + トークン（1 バイト/個, K ≤ 256）
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.arm import ArmModel
from src.datasets import Dataset
from src.forecasting import Forecaster
from src.reparam import NoiseGrid

logger = logging.getLogger(__name__)

VERSION = 1
NOISE_MAGIC = b"PSNG"
MODEL_MAGIC = b"PSAM"
FORECASTER_MAGIC = b"PSFC"
RUN_MAGIC = b"PSRN"
DATASET_MAGIC = b"PSDS"

_NOISE_HEADER = struct.Struct("<4sIII")
_MODEL_HEADER = struct.Struct("<4sIIIIII")
_FORECASTER_HEADER = struct.Struct("<4sII")
_RUN_HEADER = struct.Struct("<4sIQIIIIII")
_DATASET_HEADER = struct.Struct("<4sIIII")

# 実行記録の戦略コード
STRATEGY_CODES = {"baseline": 0, "zeros": 1, "predict-last": 2, "fpi": 3, "learned": 4}
STRATEGY_NAMES = {code: name for name, code in STRATEGY_CODES.items()}


class ArtifactFormatError(Exception):
    """成果物ファイルの形式が不正な場合の例外."""


class _Reader:
    """バイト列を先頭から順に読む小さなカーソル."""

    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def unpack(self, layout: struct.Struct) -> tuple:
        end = self.offset + layout.size
        if end > len(self.data):
            raise ArtifactFormatError(f"{self.path}: truncated header at byte {len(self.data)}")
        values = layout.unpack_from(self.data, self.offset)
        self.offset = end
        return values

    def reals(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        end = self.offset + 8 * count
        if end > len(self.data):
            raise ArtifactFormatError(f"{self.path}: truncated payload at byte {len(self.data)}")
        values = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.offset)
        self.offset = end
        return values.astype(np.float64).reshape(shape)

    def raw(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise ArtifactFormatError(f"{self.path}: truncated payload at byte {len(self.data)}")
        values = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return values.copy()

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset


def _check_magic(path: Path, magic: bytes, expected: bytes, version: int | None = None) -> None:
    if magic != expected:
        raise ArtifactFormatError(f"{path}: bad magic {magic!r}, expected {expected!r}")
    if version is not None and version != VERSION:
        raise ArtifactFormatError(f"{path}: unsupported version {version}")


def _reals(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def save_noise(path: Path, grid: NoiseGrid) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_NOISE_HEADER.pack(NOISE_MAGIC, VERSION, grid.d, grid.K) + _reals(grid.eps))


def load_noise(path: Path) -> NoiseGrid:
    reader = _Reader(Path(path).read_bytes(), Path(path))
    magic, version, d, K = reader.unpack(_NOISE_HEADER)
    _check_magic(reader.path, magic, NOISE_MAGIC, version)
    return NoiseGrid(reader.reals((d, K)))


def save_checkpoint(path: Path, model: ArmModel, forecaster: Forecaster | None = None) -> None:
    """モデル（と予測モジュール）をチェックポイントとして保存する."""
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_MODEL_HEADER.pack(MODEL_MAGIC, VERSION, model.d, model.K, model.hidden, model.embed, model.layers)]
    chunks.extend(_reals(model.params[name]) for name in model.param_names())
    if forecaster is not None:
        chunks.append(_FORECASTER_HEADER.pack(FORECASTER_MAGIC, forecaster.horizon, forecaster.flags))
        chunks.extend(_reals(forecaster.params[name]) for name in forecaster.param_names())
    path.write_bytes(b"".join(chunks))
    logger.info("チェックポイントを保存した: %s（予測モジュール: %s）", path, forecaster is not None)


def load_checkpoint(path: Path) -> tuple[ArmModel, Forecaster | None]:
    """チェックポイントを読み込む.

    Raises:
        ArtifactFormatError: マジック・バージョンの不一致、または途中で切れている場合
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic, version, d, K, hidden, embed, layers = reader.unpack(_MODEL_HEADER)
    _check_magic(path, magic, MODEL_MAGIC, version)
    shapes = ArmModel._shapes(K, hidden, embed, layers)
    params = {name: reader.reals(shape) for name, shape in shapes.items()}
    model = ArmModel(d, K, hidden, embed, layers, params)
    forecaster = None
    if reader.remaining:
        f_magic, horizon, flags = reader.unpack(_FORECASTER_HEADER)
        _check_magic(path, f_magic, FORECASTER_MAGIC)
        forecaster = Forecaster.from_flags(K, hidden, horizon, flags)
        forecaster.params = {name: reader.reals(shape) for name, shape in forecaster.param_shapes().items()}
    if reader.remaining:
        raise ArtifactFormatError(f"{path}: {reader.remaining} trailing bytes")
    logger.info("チェックポイントを読み込んだ: %s (d=%d K=%d)", path, d, K)
    return model, forecaster


@dataclass(frozen=True)
class RunRecord:
    """オフラインで再生・再検証できる実行記録.

    flags のビット 0 は再パラメータ化ノイズの使用、ビット 1 は表現共有。
    """

    seed: int
    index: int
    strategy: str
    flags: int
    d: int
    K: int
    arm_calls: int
    tokens: np.ndarray


def save_run_record(path: Path, record: RunRecord) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _RUN_HEADER.pack(
        RUN_MAGIC,
        VERSION,
        record.seed,
        record.index,
        STRATEGY_CODES[record.strategy],
        record.flags,
        record.d,
        record.K,
        record.arm_calls,
    )
    path.write_bytes(header + np.asarray(record.tokens, dtype="<u4").tobytes())


def load_run_record(path: Path) -> RunRecord:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic, version, seed, index, code, flags, d, K, arm_calls = reader.unpack(_RUN_HEADER)
    _check_magic(path, magic, RUN_MAGIC, version)
    if code not in STRATEGY_NAMES:
        raise ArtifactFormatError(f"{path}: unknown strategy code {code}")
    tokens = reader.raw("<u4", d).astype(np.int64)
    return RunRecord(seed, index, STRATEGY_NAMES[code], flags, d, K, arm_calls, tokens)


def save_dataset_cache(path: Path, dataset: Dataset) -> None:
    """データセットをキャッシュ形式で保存する（K ≤ 256）."""
    if dataset.K > 256:
        raise ArtifactFormatError(f"dataset cache supports K <= 256, got {dataset.K}")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _DATASET_HEADER.pack(DATASET_MAGIC, VERSION, dataset.d, dataset.K, len(dataset))
    path.write_bytes(header + dataset.tokens.astype(np.uint8).tobytes())


def load_dataset_cache(path: Path, name: str = "cache") -> Dataset:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic, version, d, K, n = reader.unpack(_DATASET_HEADER)
    _check_magic(path, magic, DATASET_MAGIC, version)
    if K > 256:
        raise ArtifactFormatError(f"{path}: K={K} exceeds the cache limit of 256")
    tokens = reader.raw("u1", n * d).reshape(n, d).astype(np.int64)
    return Dataset(name, K, tokens)
