"""サンプリングエンジン.

祖先サンプリング（基準）、予測サンプリング、ARM 不動点反復、バッチの一斉実行、
実行の計数（ARM 呼び出し回数・予測ミス・収束反復）を提供する。

予測サンプリングはノイズ ε を固定した上で、未確定部分を予測で埋めて ARM を 1 回走らせ、
予測と出力が一致する限り有効境界を進める。出力は同じ ε の祖先サンプルとビット単位で一致する。
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from src.arm import ArmModel, TokenBuffer
from src.forecasting import Forecaster, forecast_logits, forecast_tokens
from src.metrics import breakeven_satisfied, median_cost
from src.numeric import Rng, ShapeMismatchError, uniform_open
from src.reparam import NoiseGrid, gumbel_argmax, gumbel_argmax_rows

logger = logging.getLogger(__name__)


class SamplerError(Exception):
    """サンプリングに関する基底例外."""


class StrategyError(SamplerError):
    """予測戦略とモデルの組み合わせが不正な場合の例外."""


class ExactnessError(SamplerError):
    """高速化したサンプルが祖先サンプルと一致しない場合の例外."""

    def __init__(self, strategy: str, seed: int, position: int, index: int = 0) -> None:
        super().__init__(
            f"exactness violated: strategy={strategy} seed={seed} sample={index} position={position}"
        )
        self.strategy = strategy
        self.seed = seed
        self.position = position
        self.index = index


class StrategyKind(str, Enum):
    ZEROS = "zeros"
    PREDICT_LAST = "predict-last"
    FPI = "fpi"
    LEARNED = "learned"


@dataclass(frozen=True)
class ForecastStrategy:
    """予測戦略.

    use_reparam_noise が偽なら予測は ε を使わない最頻値になる（fpi / learned のみ影響）。
    share_representation が偽の learned 戦略は h を入力しない予測モジュールを要求する。
    """

    kind: StrategyKind
    forecaster: Forecaster | None = None
    use_reparam_noise: bool = True
    share_representation: bool = True

    def validate(self, model: ArmModel) -> None:
        if self.kind is not StrategyKind.LEARNED:
            return
        f = self.forecaster
        if f is None:
            raise StrategyError("learned strategy requires a forecaster")
        if not f.matches(model):
            raise StrategyError(
                f"forecaster (K={f.K}, H={f.hidden}) does not match model (K={model.K}, H={model.hidden})"
            )
        if f.use_hidden != self.share_representation:
            raise StrategyError("share_representation must agree with the forecaster's use of h")

    @property
    def flags(self) -> int:
        return int(self.use_reparam_noise) + 2 * int(self.share_representation)

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass
class SampleReport:
    """1 回（またはバッチ 1 回分）のサンプリング実行の計数.

    mistakes は位置ごとの予測ミス数、convergence は位置ごとの収束反復
    （その位置の値が最後に変わった反復, 1 始まり）。バッチでは mistakes は合計、
    convergence は平均になる。samples は系列ごとの報告で、単体の実行では自身の写し 1 件。
    """

    arm_calls: int
    baseline_calls: int
    iterations: int
    mistakes: np.ndarray
    convergence: np.ndarray
    wall_time: float = 0.0
    forecaster_cost: float = 0.0
    arm_cost: float = 0.0
    breakeven_satisfied: bool = True
    final_overwrite: int = 0
    samples: list["SampleReport"] = field(default_factory=list)

    @property
    def call_percentage(self) -> float:
        return 100.0 * self.arm_calls / self.baseline_calls


def _check_inputs(model: ArmModel, eps: NoiseGrid) -> None:
    eps.check_shape(model.d, model.K)


class _PredictiveRun:
    """1 系列分の予測サンプリングの状態.

    prepare() で ARM に渡すバッファを作り、consume() で ARM 出力を受け取って境界を進める。
    """

    def __init__(self, model: ArmModel, strategy: ForecastStrategy, eps: NoiseGrid) -> None:
        self.strategy = strategy
        self.eps = eps
        self.d = model.d
        self.buffer = TokenBuffer.zeros(model.d, model.K)
        self.iterations = 0
        self.mistakes = np.zeros(model.d, dtype=np.int64)
        self.last_change = np.zeros(model.d, dtype=np.int64)
        self.final_overwrite = 0
        self.forecast_times: list[float] = []
        self.arm_times: list[float] = []
        self._estimate = np.full(model.d, -1, dtype=np.int64)
        self._outputs: np.ndarray | None = None
        self._logp: np.ndarray | None = None
        self._hidden: np.ndarray | None = None

    @property
    def done(self) -> bool:
        return self.buffer.complete

    def _fallback(self, start: int) -> np.ndarray:
        """前回の ARM 出力から埋める予測."""
        assert self._outputs is not None and self._logp is not None
        if self.strategy.use_reparam_noise:
            return self._outputs[start:]
        return np.argmax(self._logp[start:], axis=-1)

    def _forecast(self, i: int) -> np.ndarray:
        kind = self.strategy.kind
        if kind is StrategyKind.ZEROS:
            return np.zeros(self.d - i, dtype=np.int64)
        if kind is StrategyKind.PREDICT_LAST:
            last = self.buffer.tokens[i - 1] if i > 0 else 0
            return np.full(self.d - i, last, dtype=np.int64)
        forecasts = self._fallback(i).copy()
        if kind is StrategyKind.LEARNED:
            f = self.strategy.forecaster
            assert f is not None and self._hidden is not None
            count = min(f.horizon, self.d - i)
            eps_rows = np.zeros((f.horizon, f.K))
            eps_rows[:count] = self.eps.eps[i : i + count]
            rows = forecast_logits(f, self._hidden[i - 1], int(self.buffer.tokens[i - 1]), eps_rows)
            heads = forecast_tokens(rows[:count], eps_rows[:count], self.strategy.use_reparam_noise)
            forecasts[:count] = heads
        return forecasts

    def prepare(self) -> TokenBuffer:
        """未確定部分を予測で埋めたバッファを返す. 初回は全 0 のまま."""
        if self.iterations > 0:
            started = time.perf_counter()
            i = self.buffer.frontier
            self.buffer.tokens[i:] = self._forecast(i)
            self.forecast_times.append(time.perf_counter() - started)
        return self.buffer

    def consume(self, logp: np.ndarray, hidden: np.ndarray) -> None:
        """ARM 出力を受け取り、予測が一致する限り境界を進め、最初の不一致を上書きする."""
        self.iterations += 1
        i = self.buffer.frontier
        outputs = gumbel_argmax_rows(logp, self.eps.eps)
        estimate = self.buffer.tokens.copy()
        estimate[i:] = outputs[i:]
        changed = estimate != self._estimate
        self.last_change[changed] = self.iterations
        self._estimate = estimate

        wrong = np.flatnonzero(self.buffer.tokens[i:] != outputs[i:])
        if wrong.size == 0:
            self.buffer.advance(self.d)
            logger.debug("反復 %d: 境界 %d → %d（全一致）", self.iterations, i, self.d)
        else:
            k = i + int(wrong[0])
            self.buffer.write(k, int(outputs[k]))
            self.mistakes[k] += 1
            self.buffer.advance(k + 1)
            if k + 1 == self.d:
                self.final_overwrite = 1
            logger.debug("反復 %d: 境界 %d → %d（位置 %d で予測ミス）", self.iterations, i, k + 1, k)
        self._outputs = outputs
        self._logp = logp
        self._hidden = hidden

    def report(self, wall_time: float) -> SampleReport:
        f_cost = median_cost(self.forecast_times)
        a_cost = median_cost(self.arm_times)
        return SampleReport(
            arm_calls=self.iterations,
            baseline_calls=self.d,
            iterations=self.iterations,
            mistakes=self.mistakes.copy(),
            convergence=self.last_change.copy(),
            wall_time=wall_time,
            forecaster_cost=f_cost,
            arm_cost=a_cost,
            breakeven_satisfied=breakeven_satisfied(self.iterations, self.d, f_cost, a_cost),
            final_overwrite=self.final_overwrite,
        )


def ancestral_sample(model: ArmModel, eps: NoiseGrid) -> tuple[TokenBuffer, SampleReport]:
    """祖先サンプリング. ちょうど d 回 ARM を呼ぶ基準実装."""
    _check_inputs(model, eps)
    buffer = TokenBuffer.zeros(model.d, model.K)
    arm_times = []
    started = time.perf_counter()
    for i in range(model.d):
        call_started = time.perf_counter()
        logp, _ = model.forward(buffer)
        arm_times.append(time.perf_counter() - call_started)
        buffer.write(i, gumbel_argmax(logp[i], eps.eps[i]))
        buffer.advance(i + 1)
    wall_time = time.perf_counter() - started
    report = SampleReport(
        arm_calls=model.d,
        baseline_calls=model.d,
        iterations=model.d,
        mistakes=np.zeros(model.d, dtype=np.int64),
        convergence=np.arange(1, model.d + 1),
        wall_time=wall_time,
        arm_cost=median_cost(arm_times),
    )
    return buffer, report


def ancestral_batch(model: ArmModel, eps_batch: list[NoiseGrid]) -> tuple[list[TokenBuffer], SampleReport]:
    """バッチの祖先サンプリング（一斉実行で d 回の呼び出し）."""
    if not eps_batch:
        raise SamplerError("batch must not be empty")
    for eps in eps_batch:
        _check_inputs(model, eps)
    buffers = [TokenBuffer.zeros(model.d, model.K) for _ in eps_batch]
    started = time.perf_counter()
    for i in range(model.d):
        outputs = model.forward_many(buffers)
        for buffer, eps, (logp, _) in zip(buffers, eps_batch, outputs):
            buffer.write(i, gumbel_argmax(logp[i], eps.eps[i]))
            buffer.advance(i + 1)
    wall_time = time.perf_counter() - started
    report = SampleReport(
        arm_calls=model.d,
        baseline_calls=model.d,
        iterations=model.d,
        mistakes=np.zeros(model.d, dtype=np.int64),
        convergence=np.arange(1, model.d + 1).astype(np.float64),
        wall_time=wall_time,
    )
    return buffers, report


def predictive_sample(
    model: ArmModel,
    strategy: ForecastStrategy,
    eps: NoiseGrid,
) -> tuple[TokenBuffer, SampleReport]:
    """予測サンプリング.

    予測が正しい限り出力は有効であり、最初の不一致位置の ARM 出力も有効なので上書きして進む。
    ARM 呼び出し回数は反復回数 m（≤ d）。

    Raises:
        StrategyError: 戦略とモデルの形状が合わない場合
    """
    _check_inputs(model, eps)
    strategy.validate(model)
    run = _PredictiveRun(model, strategy, eps)
    started = time.perf_counter()
    while not run.done:
        buffer = run.prepare()
        call_started = time.perf_counter()
        logp, hidden = model.forward(buffer)
        run.arm_times.append(time.perf_counter() - call_started)
        run.consume(logp, hidden)
    report = run.report(time.perf_counter() - started)
    report.samples = [replace(report)]
    return run.buffer, report


def fixed_point_sample(model: ArmModel, eps: NoiseGrid) -> tuple[TokenBuffer, SampleReport]:
    """ARM 不動点反復. 境界追跡つきなので確認のための余分な 1 回は不要."""
    return predictive_sample(model, ForecastStrategy(StrategyKind.FPI), eps)


def fixed_point_sample_literal(model: ArmModel, eps: NoiseGrid) -> tuple[TokenBuffer, int]:
    """x ← g(x, ε) を変化がなくなるまで繰り返す素朴な不動点反復.

    Returns:
        (不動点, ARM 呼び出し回数)。確認の 1 回を含むので最大 d + 1 回。
    """
    _check_inputs(model, eps)
    current = TokenBuffer.zeros(model.d, model.K)
    calls = 0
    while True:
        logp, _ = model.forward(current)
        calls += 1
        updated = gumbel_argmax_rows(logp, eps.eps)
        if np.array_equal(updated, current.tokens):
            return TokenBuffer.full(updated, model.K), calls
        current = TokenBuffer(updated, model.K)


def batch_sample(
    model: ArmModel,
    strategy: ForecastStrategy,
    eps_batch: list[NoiseGrid],
) -> tuple[list[TokenBuffer], SampleReport]:
    """バッチの一斉実行. 未完了の系列をまとめて 1 回ずつ推論する.

    報告する ARM 呼び出し回数は一斉反復の回数（= 系列ごとの反復回数の最大値）。
    """
    if not eps_batch:
        raise SamplerError("batch must not be empty")
    for eps in eps_batch:
        _check_inputs(model, eps)
    strategy.validate(model)
    runs = [_PredictiveRun(model, strategy, eps) for eps in eps_batch]
    iterations = 0
    arm_times: list[float] = []
    started = time.perf_counter()
    while True:
        active = [run for run in runs if not run.done]
        if not active:
            break
        buffers = [run.prepare() for run in active]
        call_started = time.perf_counter()
        outputs = model.forward_many(buffers)
        arm_times.append(time.perf_counter() - call_started)
        for run, (logp, hidden) in zip(active, outputs):
            run.consume(logp, hidden)
        iterations += 1
    wall_time = time.perf_counter() - started
    for run in runs:
        run.arm_times = arm_times
    samples = [run.report(wall_time) for run in runs]
    f_cost = median_cost([t for run in runs for t in run.forecast_times])
    a_cost = median_cost(arm_times)
    report = SampleReport(
        arm_calls=iterations,
        baseline_calls=model.d,
        iterations=iterations,
        mistakes=np.sum([s.mistakes for s in samples], axis=0),
        convergence=np.mean([s.convergence for s in samples], axis=0),
        wall_time=wall_time,
        forecaster_cost=f_cost,
        arm_cost=a_cost,
        breakeven_satisfied=breakeven_satisfied(iterations, model.d, f_cost, a_cost),
        final_overwrite=sum(s.final_overwrite for s in samples),
        samples=samples,
    )
    if len(runs) == 1:
        report.convergence = samples[0].convergence
    return [run.buffer for run in runs], report


def simulate_run_length(p: float, trials: int, rng: Rng) -> float:
    """各予測が独立に確率 p で正しいときの、先頭から連続して正しい長さの平均.

    逆関数法で floor(log u / log p) を引く（期待値は p / (1 − p)）。

    Raises:
        ValueError: p が [0, 1) の外、または trials < 1 の場合
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must be in [0, 1), got {p}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if p == 0.0:
        return 0.0
    u = uniform_open(rng, trials)
    lengths = np.floor(np.log(u) / np.log(p))
    return float(lengths.mean())


def make_strategy(
    name: str,
    forecaster: Forecaster | None = None,
    use_reparam_noise: bool = True,
    share_representation: bool = True,
) -> ForecastStrategy:
    """戦略名から ForecastStrategy を作る."""
    try:
        kind = StrategyKind(name)
    except ValueError as e:
        raise StrategyError(f"unknown strategy: {name}") from e
    return ForecastStrategy(kind, forecaster if kind is StrategyKind.LEARNED else None, use_reparam_noise, share_representation)


def first_mismatch(a: np.ndarray, b: np.ndarray) -> int | None:
    """2 つのトークン列が最初に食い違う位置（一致すれば None）."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"token shapes differ: {a.shape} vs {b.shape}")
    diff = np.flatnonzero(a != b)
    return int(diff[0]) if diff.size else None
