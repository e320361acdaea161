"""ARM と予測モジュールの学習ループ.

train_arm はミニバッチ Adam で平均 NLL を最小化する。予測モジュールを渡すと
KL 予測損失との同時学習になり、共有表現 h へは forecast_weight を掛けた勾配だけが流れる。
train_forecaster は ARM を固定した事後学習。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from src.arm import ArmModel, dataset_bpd, nll_and_grads
from src.datasets import Dataset
from src.forecasting import Forecaster, ForecastLoss, _forecast_loss_from_cache
from src.numeric import Adam, Rng
from src.reparam import sample_posterior_noise

logger = logging.getLogger(__name__)


class TrainingDivergedError(Exception):
    """損失が有限でなくなった場合の例外."""

    def __init__(self, step: int, detail: str = "non-finite loss") -> None:
        super().__init__(f"{detail} at step {step}")
        self.step = step


@dataclass(frozen=True)
class CurvePoint:
    step: int
    train_bpd: float
    val_bpd: float
    forecast_loss: float


@dataclass
class TrainCurve:
    """評価点の列. step は狭義単調増加."""

    points: list[CurvePoint] = field(default_factory=list)

    def append(self, point: CurvePoint) -> None:
        if self.points and point.step <= self.points[-1].step:
            raise ValueError(f"curve steps must increase: {point.step} after {self.points[-1].step}")
        self.points.append(point)

    @property
    def final(self) -> CurvePoint:
        return self.points[-1]

    def __len__(self) -> int:
        return len(self.points)


def _posterior_batch(tokens: np.ndarray, logp: np.ndarray, rng: Rng) -> np.ndarray:
    """各系列の事後ノイズ (B, d, K) を引く."""
    return np.stack([sample_posterior_noise(row, mu, rng).eps for row, mu in zip(tokens, logp)])


def evaluate_forecaster(model: ArmModel, forecaster: Forecaster, tokens: np.ndarray, rng: Rng) -> float:
    """系列集合に対する 1 対あたりの平均 KL."""
    cache = model._forward(tokens)
    eps = _posterior_batch(tokens, cache.logp, rng) if forecaster.condition_on_noise else None
    loss = _forecast_loss_from_cache(forecaster, tokens, cache.hidden, cache.logp, eps, 0.0)
    return loss.mean


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        logger.error("損失が発散した: step=%d value=%r", step, value)
        raise TrainingDivergedError(step)


def _eval_tokens(dataset: Dataset, count: int) -> np.ndarray:
    return dataset.tokens[: min(count, len(dataset))]


def train_arm(
    model: ArmModel,
    dataset: Dataset,
    config: dict,
    rng: Rng,
    validation: Dataset | None = None,
    forecaster: Forecaster | None = None,
) -> tuple[ArmModel, TrainCurve]:
    """ARM を学習する（forecaster を渡すと同時学習）.

    1 ステップの損失は 平均 NLL (nats) + weight · ΣKL / (B·d)。
    予測ヘッド自身は重みを掛けない KL 勾配で別の Adam が更新する。

    Args:
        model: 学習する ARM（その場で更新される）
        dataset: 学習データ
        config: 設定辞書（training セクションを使う）
        rng: ミニバッチ選択用の乱数
        validation: 検証データ（省略時は val_bpd を NaN とする）
        forecaster: 同時学習する予測モジュール（省略可）

    Returns:
        (学習後のモデル, 学習曲線)

    Raises:
        TrainingDivergedError: 損失が有限でなくなった場合
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    tr = config["training"]
    steps = int(tr["steps"])
    batch_size = int(tr["batch_size"])
    eval_every = int(tr["eval_every"])
    weight = float(tr["forecast_weight"])
    eval_train = _eval_tokens(dataset, int(tr["eval_items"]))
    eval_val = None if validation is None or len(validation) == 0 else _eval_tokens(validation, int(tr["eval_items"]))
    batch_rng = rng.derive("batches")
    noise_rng = rng.derive("posterior-noise")
    eval_noise_seed = rng.derive("eval-noise").seed

    arm_opt = Adam.from_config(tr)
    head_opt = Adam.from_config(tr)
    curve = TrainCurve()

    def record(step: int) -> None:
        train_bpd = dataset_bpd(model, eval_train)
        val_bpd = dataset_bpd(model, eval_val) if eval_val is not None else float("nan")
        f_loss = float("nan")
        if forecaster is not None:
            f_loss = evaluate_forecaster(model, forecaster, eval_train, Rng(eval_noise_seed))
        curve.append(CurvePoint(step, train_bpd, val_bpd, f_loss))
        logger.info("step %d: train_bpd=%.4f val_bpd=%.4f forecast_loss=%.5f", step, train_bpd, val_bpd, f_loss)

    logger.info("ARM の学習を開始する: steps=%d batch=%d 同時学習=%s", steps, batch_size, forecaster is not None)
    record(0)
    for step in range(1, steps + 1):
        tokens = dataset.tokens[batch_rng.integers(0, len(dataset), size=batch_size)]
        loss, grads, cache = nll_and_grads(model, tokens)
        _check_finite(loss, step)
        if forecaster is not None:
            eps = _posterior_batch(tokens, cache.logp, noise_rng) if forecaster.condition_on_noise else None
            f_loss: ForecastLoss = _forecast_loss_from_cache(forecaster, tokens, cache.hidden, cache.logp, eps, weight)
            scale = 1.0 / (tokens.shape[0] * tokens.shape[1])
            _check_finite(loss + weight * f_loss.value * scale, step)
            if weight > 0 and forecaster.use_hidden:
                d_logits = np.zeros_like(cache.logp)
                shared = model.backward(cache, d_logits, weight * scale * f_loss.hidden_grad)
                for name, g in shared.items():
                    grads[name] = grads[name] + g
            head_opt.step(forecaster.params, {n: g * scale for n, g in f_loss.grads.items()})
        arm_opt.step(model.params, grads)
        if step % eval_every == 0 or step == steps:
            record(step)
    logger.info("ARM の学習を終了した: 最終 train_bpd=%.4f", curve.final.train_bpd)
    return model, curve


def train_forecaster(
    model: ArmModel,
    forecaster: Forecaster,
    dataset: Dataset,
    config: dict,
    rng: Rng,
    steps: int | None = None,
) -> tuple[Forecaster, TrainCurve]:
    """ARM を固定して予測モジュールだけを学習する.

    condition_on_noise のときは、各系列について事後ノイズ p(ε|x) を引いて入力に使う。
    曲線の forecast_loss は 1 対あたりの平均 KL、bpd 列は固定した ARM の値。

    Raises:
        TrainingDivergedError: 損失が有限でなくなった場合
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    tr = config["training"]
    steps = int(tr["forecaster_steps"]) if steps is None else steps
    batch_size = int(tr["batch_size"])
    eval_every = int(tr["eval_every"])
    eval_train = _eval_tokens(dataset, int(tr["eval_items"]))
    batch_rng = rng.derive("forecaster-batches")
    noise_rng = rng.derive("forecaster-noise")
    eval_noise_seed = rng.derive("forecaster-eval-noise").seed
    optimizer = Adam.from_config(tr)
    curve = TrainCurve()
    arm_bpd = dataset_bpd(model, eval_train)

    def record(step: int) -> None:
        value = evaluate_forecaster(model, forecaster, eval_train, Rng(eval_noise_seed))
        _check_finite(value, step)
        curve.append(CurvePoint(step, arm_bpd, float("nan"), value))
        logger.info("予測モジュール step %d: KL=%.5f", step, value)

    logger.info("予測モジュールの事後学習を開始する: steps=%d T=%d", steps, forecaster.horizon)
    record(0)
    for step in range(1, steps + 1):
        tokens = dataset.tokens[batch_rng.integers(0, len(dataset), size=batch_size)]
        cache = model._forward(tokens)
        eps = _posterior_batch(tokens, cache.logp, noise_rng) if forecaster.condition_on_noise else None
        loss = _forecast_loss_from_cache(forecaster, tokens, cache.hidden, cache.logp, eps, 0.0)
        _check_finite(loss.value, step)
        scale = 1.0 / (tokens.shape[0] * tokens.shape[1])
        optimizer.step(forecaster.params, {n: g * scale for n, g in loss.grads.items()})
        if step % eval_every == 0 or step == steps:
            record(step)
    return forecaster, curve
