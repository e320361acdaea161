"""数値計算の共通基盤.

全モジュールが使う 64bit 実数行列、安定な log-softmax、Adam 最適化、
シード付き乱数（用途ラベルごとにストリームを分岐）、中心差分による勾配検査を提供する。
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

# 一様乱数のクランプ範囲（Gumbel 変換の端点で無限大にならないように）
UNIFORM_LOW = 2.0**-53
UNIFORM_HIGH = 1.0 - 2.0**-53


class NumericError(Exception):
    """数値計算に関する基底例外."""


class NonFiniteError(NumericError):
    """NaN / Inf が現れた場合の例外."""


class ShapeMismatchError(NumericError):
    """配列の形状が一致しない場合の例外."""


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    """2 つの配列の形状が一致することを確認する."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {a.shape} != {b.shape}")


class Rng:
    """シード付き乱数生成器.

    同じシードからは同じ系列が得られる。ノイズ生成・初期化・シャッフルなど
    用途ごとに derive(label) でサブストリームを作り、系列が重ならないようにする。
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> "Rng":
        """hash(seed, label) をシードとする独立なストリームを返す."""
        digest = hashlib.blake2b(f"{self.seed}:{label}".encode("utf-8"), digest_size=8).digest()
        return Rng(int.from_bytes(digest, "little"))

    def random(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        """[0, 1) の一様乱数（クランプなし）."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, scale: float = 1.0, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...] | None = None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


def uniform_open(rng: Rng, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
    """開区間 (0, 1) の一様乱数を返す.

    生の乱数が 0 または 1 に一致した場合は [2^-53, 1 - 2^-53] にクランプする。
    """
    u = np.clip(rng.random(size), UNIFORM_LOW, UNIFORM_HIGH)
    if size is None:
        return float(u)
    return u


def log_softmax(logits: np.ndarray) -> Matrix:
    """最後の軸に沿って log-softmax を計算する.

    最大値を引いてから指数をとるので、大きな入力でもオーバーフローしない。

    Raises:
        NonFiniteError: 入力に NaN / Inf が含まれる場合
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logsumexp(values: np.ndarray) -> np.ndarray:
    """最後の軸に沿った安定な log Σ exp."""
    values = np.asarray(values, dtype=np.float64)
    peak = np.max(values, axis=-1)
    return peak + np.log(np.sum(np.exp(values - peak[..., None]), axis=-1))


@dataclass(frozen=True)
class OptimizerState:
    """1 つのパラメータ配列に対する Adam の状態."""

    lr: float
    m: Matrix
    v: Matrix
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def for_params(cls, params: Matrix, lr: float = 1e-3, **hyper: float) -> "OptimizerState":
        return cls(lr=lr, m=np.zeros_like(params), v=np.zeros_like(params), **hyper)


def adam_step(params: Matrix, grads: Matrix, state: OptimizerState) -> tuple[Matrix, OptimizerState]:
    """Adam による 1 ステップの更新.

    重み減衰は Adam の更新量とは分離し、params ← params·(1 − lr·wd) を先に適用する。

    Returns:
        (更新後のパラメータ, 更新後の状態)

    Raises:
        ShapeMismatchError: params / grads / 状態の形状が一致しない場合
    """
    check_same_shape(params, grads, "params/grads")
    check_same_shape(params, state.m, "params/optimizer state")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    decayed = params * (1.0 - state.lr * state.weight_decay)
    updated = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, replace(state, m=m, v=v, step=step)


@dataclass
class Adam:
    """名前付きパラメータ辞書をまとめて更新する Adam.

    lr_decay は 1 ステップごとに学習率へ掛かる係数（1.0 なら減衰なし）。
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    lr_decay: float = 1.0
    states: dict[str, OptimizerState] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def from_config(cls, training: dict) -> "Adam":
        return cls(
            lr=float(training["lr"]),
            beta1=float(training["beta1"]),
            beta2=float(training["beta2"]),
            eps=float(training["eps"]),
            weight_decay=float(training["weight_decay"]),
            lr_decay=float(training.get("lr_decay", 1.0)),
        )

    @property
    def current_lr(self) -> float:
        return self.lr * self.lr_decay**self.steps

    def step(self, params: dict[str, Matrix], grads: dict[str, Matrix]) -> None:
        """params を grads で更新する（辞書の値を置き換える）."""
        lr = self.current_lr
        for name, grad in grads.items():
            state = self.states.get(name)
            if state is None:
                state = OptimizerState.for_params(
                    params[name],
                    lr=lr,
                    beta1=self.beta1,
                    beta2=self.beta2,
                    eps=self.eps,
                    weight_decay=self.weight_decay,
                )
            params[name], self.states[name] = adam_step(params[name], grad, replace(state, lr=lr))
        self.steps += 1


def finite_diff_check(
    loss_fn: Callable[[Matrix], float],
    params: Matrix,
    analytic_grads: Matrix,
    h: float = 1e-5,
    max_coords: int = 64,
    rng: Rng | None = None,
) -> float:
    """中心差分で解析的勾配を検査し、最大相対誤差を返す.

    相対誤差は |numeric − analytic| / max(1e-8, |analytic| + |numeric|)。
    座標数が max_coords を超える場合は rng で選んだ部分集合だけを調べる。

    Raises:
        ValueError: h が正でない場合
        NonFiniteError: 損失が有限でない場合
    """
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    check_same_shape(params, analytic_grads, "params/analytic grads")
    flat = np.array(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic_grads, dtype=np.float64).ravel()
    coords = np.arange(flat.size)
    if flat.size > max_coords:
        rng = rng or Rng(0)
        coords = np.sort(rng.permutation(flat.size)[:max_coords])

    def evaluate(vector: np.ndarray) -> float:
        value = float(loss_fn(vector.reshape(params.shape)))
        if not np.isfinite(value):
            raise NonFiniteError("non-finite loss")
        return value

    worst = 0.0
    for c in coords:
        original = flat[c]
        flat[c] = original + h
        plus = evaluate(flat)
        flat[c] = original - h
        minus = evaluate(flat)
        flat[c] = original
        numeric = (plus - minus) / (2.0 * h)
        error = abs(numeric - analytic[c]) / max(1e-8, abs(analytic[c]) + abs(numeric))
        worst = max(worst, error)
    logger.debug("勾配検査: %d 座標, 最大相対誤差 %.3e", len(coords), worst)
    return worst
