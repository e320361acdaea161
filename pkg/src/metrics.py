"""ベンチマーク指標の算出ロジック.

ARM 呼び出し割合、Bessel 補正つきの平均・標準偏差、損益分岐条件、
CSV 行の集計と、レポート末尾に添える公表値（参考値）を扱う。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# 公表されている参考値（binary MNIST, PixelCNN++ 相当のモデル, GPU 実行）
# 卓上規模の測定値とは規模が異なり直接比較できない
PUBLISHED_REFERENCE: dict[str, dict[str, float]] = {
    "bench": {
        "baseline": 100.0,
        "zeros": 14.5,
        "predict-last": 7.8,
        "fpi": 3.3,
    },
    "ablate": {
        "fpi": 25.9,
        "fpi-no-reparam": 97.2,
        "learned": 50.9,
        "learned-no-sharing": 67.1,
    },
}

BENCH_COLUMNS = [
    "dataset",
    "strategy",
    "batch_size",
    "seed",
    "arm_calls",
    "call_percentage",
    "wall_time",
    "breakeven",
]
SUMMARY_COLUMNS = [
    "dataset",
    "strategy",
    "batch_size",
    "n",
    "mean_call_percentage",
    "std_call_percentage",
    "mean_wall_time",
    "wall_time_ratio",
]


def call_percentage(arm_calls: int, d: int) -> float:
    """祖先サンプリング（d 回）に対する ARM 呼び出し回数の割合（%）."""
    return 100.0 * arm_calls / d


def mean_and_std(values: list[float] | np.ndarray) -> tuple[float, float]:
    """平均と Bessel 補正つき標準偏差 sqrt(Σ(x − x̄)² / (n − 1)). n = 1 のとき std は 0."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ValueError("no values to aggregate")
    mean = float(data.mean())
    if data.size == 1:
        return mean, 0.0
    return mean, float(math.sqrt(float(np.sum((data - mean) ** 2)) / (data.size - 1)))


def median_cost(durations: list[float]) -> float:
    """1 回あたり所要時間の中央値（秒）. 空なら 0."""
    if not durations:
        return 0.0
    return float(np.median(durations))


def breakeven_satisfied(m: int, d: int, forecaster_cost: float, arm_cost: float) -> bool:
    """予測の追加コストが節約した ARM 呼び出しで回収できるか: m·cost(F) ≤ (d − m)·cost(ARM)."""
    return m * forecaster_cost <= (d - m) * arm_cost


@dataclass(frozen=True)
class BenchRow:
    """1 回のベンチマーク実行（戦略 × バッチサイズ × シード）."""

    dataset: str
    strategy: str
    batch_size: int
    seed: int
    arm_calls: int
    call_percentage: float
    wall_time: float
    breakeven: bool

    def as_csv_row(self) -> list[str]:
        return [
            self.dataset,
            self.strategy,
            str(self.batch_size),
            str(self.seed),
            str(self.arm_calls),
            repr(self.call_percentage),
            repr(self.wall_time),
            str(int(self.breakeven)),
        ]

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> "BenchRow":
        return cls(
            dataset=row["dataset"],
            strategy=row["strategy"],
            batch_size=int(row["batch_size"]),
            seed=int(row["seed"]),
            arm_calls=int(row["arm_calls"]),
            call_percentage=float(row["call_percentage"]),
            wall_time=float(row["wall_time"]),
            breakeven=bool(int(row["breakeven"])),
        )


@dataclass(frozen=True)
class SummaryRow:
    """(データセット, 戦略, バッチサイズ) ごとの集計."""

    dataset: str
    strategy: str
    batch_size: int
    n: int
    mean: float
    std: float
    mean_wall_time: float
    wall_time_ratio: float

    def as_csv_row(self) -> list[str]:
        return [
            self.dataset,
            self.strategy,
            str(self.batch_size),
            str(self.n),
            repr(self.mean),
            repr(self.std),
            repr(self.mean_wall_time),
            repr(self.wall_time_ratio),
        ]


def aggregate_rows(rows: list[BenchRow]) -> list[SummaryRow]:
    """生の行を集計する. 出現順を保ち、壁時計時間は同じ条件の baseline に対する比も出す."""
    groups: dict[tuple[str, str, int], list[BenchRow]] = {}
    for row in rows:
        groups.setdefault((row.dataset, row.strategy, row.batch_size), []).append(row)
    baseline_wall = {
        (key[0], key[2]): float(np.mean([r.wall_time for r in members]))
        for key, members in groups.items()
        if key[1] == "baseline"
    }
    summary = []
    for (dataset, strategy, batch_size), members in groups.items():
        mean, std = mean_and_std([r.call_percentage for r in members])
        wall = float(np.mean([r.wall_time for r in members]))
        base = baseline_wall.get((dataset, batch_size))
        ratio = wall / base if base else float("nan")
        summary.append(SummaryRow(dataset, strategy, batch_size, len(members), mean, std, wall, ratio))
    return summary


def build_summary_text(summary: list[SummaryRow]) -> list[str]:
    """標準出力向けの集計表."""
    lines = [f"{'dataset':<10} {'strategy':<20} {'batch':>5} {'calls %':>16} {'time ratio':>10}"]
    for row in summary:
        lines.append(
            f"{row.dataset:<10} {row.strategy:<20} {row.batch_size:>5} "
            f"{row.mean:>7.2f} ± {row.std:<6.2f} {row.wall_time_ratio:>10.3f}"
        )
    return lines


def build_reference_footer(table: str, measured: dict[str, float]) -> list[str]:
    """測定値の横に公表参考値を並べたフッター.

    規模が異なるため比較できない旨を必ず明記する。
    """
    reference = PUBLISHED_REFERENCE[table]
    lines = ["参考: 公表値（binary MNIST, 大規模モデル）。卓上規模の測定値とは比較不可"]
    for name, value in reference.items():
        got = measured.get(name)
        got_text = f"{got:.2f}%" if got is not None else "-"
        lines.append(f"  {name:<20} 公表 {value:>5.1f}%  測定 {got_text}")
    return lines
