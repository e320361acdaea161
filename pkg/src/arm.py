"""自己回帰モデル（ARM）の抽象と参照実装.

参照モデルは 1 次元の厳密因果な膨張畳み込み（カーネル幅 2、膨張率 1,2,4,…）を
埋め込み列に重ねたもの。入力を 1 つ右にずらし、位置 0 には学習される開始埋め込みを
置くことで、出力位置 i がトークン i 以降を読まないことを構造的に保証する。

勾配は numpy で手書きの逆伝播により計算する。
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass

import numpy as np

from src.numeric import Matrix, Rng, ShapeMismatchError, log_softmax

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)


class TokenRangeError(ValueError):
    """トークン値や有効境界（frontier）が範囲外の場合の例外."""


@dataclass
class TokenBuffer:
    """長さ d の離散系列と有効境界 frontier.

    frontier より前の要素は確定したサンプル、以降は予測値またはプレースホルダ。
    """

    tokens: np.ndarray
    K: int
    frontier: int = 0

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        if self.tokens.ndim != 1:
            raise ShapeMismatchError(f"tokens must be 1-D, got shape {self.tokens.shape}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.K):
            raise TokenRangeError(f"token outside [0, {self.K})")
        if not 0 <= self.frontier <= self.d:
            raise TokenRangeError(f"frontier {self.frontier} outside [0, {self.d}]")

    @classmethod
    def zeros(cls, d: int, K: int) -> "TokenBuffer":
        return cls(np.zeros(d, dtype=np.int64), K, 0)

    @classmethod
    def full(cls, tokens: np.ndarray, K: int) -> "TokenBuffer":
        """全要素が確定済みのバッファ."""
        tokens = np.asarray(tokens)
        return cls(tokens, K, int(tokens.shape[0]))

    @property
    def d(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def complete(self) -> bool:
        return self.frontier == self.d

    def advance(self, frontier: int) -> None:
        """frontier を進める（後退は許さない）."""
        if frontier < self.frontier or frontier > self.d:
            raise TokenRangeError(f"frontier cannot move from {self.frontier} to {frontier}")
        self.frontier = frontier

    def write(self, position: int, value: int) -> None:
        if not 0 <= value < self.K:
            raise TokenRangeError(f"token {value} outside [0, {self.K})")
        self.tokens[position] = value

    def copy(self) -> "TokenBuffer":
        return TokenBuffer(self.tokens.copy(), self.K, self.frontier)


@dataclass
class ForwardCache:
    """逆伝播に必要な順伝播の中間値（形状は先頭がバッチ軸）."""

    tokens: np.ndarray
    inputs: list[Matrix]
    preacts: list[Matrix]
    hidden: Matrix
    logp: Matrix


def _shift(values: Matrix, offset: int) -> Matrix:
    """系列軸を offset だけ後ろへずらし、先頭を 0 で埋める."""
    shifted = np.zeros_like(values)
    if offset < values.shape[1]:
        shifted[:, offset:] = values[:, : values.shape[1] - offset]
    return shifted


class ArmModel:
    """膨張因果畳み込みによる参照 ARM.

    パラメータの並び（チェックポイントの保存順）:
    start, embedding, conv{l}.w0, conv{l}.w1, conv{l}.b (l = 0..L-1), out.w, out.b
    """

    def __init__(self, d: int, K: int, hidden: int, embed: int, layers: int, params: dict[str, Matrix]) -> None:
        self.d = d
        self.K = K
        self.hidden = hidden
        self.embed = embed
        self.layers = layers
        self.params = params
        self._calls = 0
        self._lock = threading.Lock()
        missing = [name for name in self.param_names() if name not in params]
        if missing:
            raise ShapeMismatchError(f"missing parameters: {missing}")
        for name, shape in self.param_shapes().items():
            if params[name].shape != shape:
                raise ShapeMismatchError(f"{name}: shape {params[name].shape} != {shape}")

    @classmethod
    def initialize(
        cls,
        d: int,
        K: int,
        rng: Rng,
        hidden: int = 64,
        embed: int = 16,
        layers: int = 4,
        zero_output: bool = True,
    ) -> "ArmModel":
        """乱数で初期化したモデルを作る.

        内部層は fan-in スケールの一様分布、出力射影は zero_output のとき 0
        （初期分布が一様になる）。
        """
        shapes = cls._shapes(K, hidden, embed, layers)
        params: dict[str, Matrix] = {}
        for name, shape in shapes.items():
            if name in ("start", "embedding"):
                params[name] = rng.normal(1.0, shape)
            elif name.endswith(".b"):
                params[name] = np.zeros(shape)
            elif name == "out.w" and zero_output:
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(2 * shape[0]) if name.startswith("conv") else 1.0 / math.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, shape)
        logger.debug("ARM を初期化: d=%d K=%d H=%d E=%d L=%d", d, K, hidden, embed, layers)
        return cls(d, K, hidden, embed, layers, params)

    @staticmethod
    def _shapes(K: int, hidden: int, embed: int, layers: int) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {"start": (embed,), "embedding": (K, embed)}
        width = embed
        for layer in range(layers):
            shapes[f"conv{layer}.w0"] = (width, hidden)
            shapes[f"conv{layer}.w1"] = (width, hidden)
            shapes[f"conv{layer}.b"] = (hidden,)
            width = hidden
        shapes["out.w"] = (hidden, K)
        shapes["out.b"] = (K,)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return self._shapes(self.K, self.hidden, self.embed, self.layers)

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def copy(self) -> "ArmModel":
        params = {name: value.copy() for name, value in self.params.items()}
        return type(self)(self.d, self.K, self.hidden, self.embed, self.layers, params)

    @property
    def calls(self) -> int:
        """forward / forward_many の呼び出し回数（ARM calls）."""
        with self._lock:
            return self._calls

    def reset_calls(self) -> None:
        with self._lock:
            self._calls = 0

    def _count_call(self) -> None:
        with self._lock:
            self._calls += 1

    def _embed(self, tokens: np.ndarray) -> Matrix:
        """入力を 1 つ右へずらした埋め込み列. 位置 0 は開始埋め込み."""
        z = np.empty((tokens.shape[0], tokens.shape[1], self.embed))
        z[:, 0] = self.params["start"]
        z[:, 1:] = self.params["embedding"][tokens[:, :-1]]
        return z

    def _embed_backward(self, tokens: np.ndarray, d_z: Matrix, grads: dict[str, Matrix]) -> None:
        grads["start"] = d_z[:, 0].sum(axis=0)
        d_embedding = np.zeros_like(self.params["embedding"])
        np.add.at(d_embedding, tokens[:, :-1].ravel(), d_z[:, 1:].reshape(-1, self.embed))
        grads["embedding"] = d_embedding

    def _check_tokens(self, tokens: np.ndarray) -> None:
        if tokens.ndim != 2 or tokens.shape[1] != self.d:
            raise ShapeMismatchError(f"expected token batch (B, {self.d}), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.K):
            raise TokenRangeError(f"token outside [0, {self.K})")

    def _forward(self, tokens: np.ndarray) -> ForwardCache:
        """バッチ (B, d) の順伝播（呼び出し回数は数えない）."""
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_tokens(tokens)
        a = self._embed(tokens)
        inputs: list[Matrix] = []
        preacts: list[Matrix] = []
        for layer in range(self.layers):
            p = self.params
            pre = (
                a @ p[f"conv{layer}.w1"]
                + _shift(a, 2**layer) @ p[f"conv{layer}.w0"]
                + p[f"conv{layer}.b"]
            )
            inputs.append(a)
            preacts.append(pre)
            a = np.maximum(pre, 0.0)
        logits = a @ self.params["out.w"] + self.params["out.b"]
        return ForwardCache(tokens, inputs, preacts, a, log_softmax(logits))

    def backward(self, cache: ForwardCache, d_logits: Matrix, d_hidden: Matrix | None = None) -> dict[str, Matrix]:
        """出力 logits（softmax 前）と hidden に対する勾配から、全パラメータの勾配を返す."""
        p = self.params
        grads: dict[str, Matrix] = {}
        grads["out.w"] = np.einsum("bdh,bdk->hk", cache.hidden, d_logits)
        grads["out.b"] = d_logits.sum(axis=(0, 1))
        d_a = d_logits @ p["out.w"].T
        if d_hidden is not None:
            d_a = d_a + d_hidden
        for layer in reversed(range(self.layers)):
            offset = 2**layer
            a = cache.inputs[layer]
            d_pre = d_a * (cache.preacts[layer] > 0.0)
            grads[f"conv{layer}.w1"] = np.einsum("bdc,bdh->ch", a, d_pre)
            grads[f"conv{layer}.w0"] = np.einsum("bdc,bdh->ch", _shift(a, offset), d_pre)
            grads[f"conv{layer}.b"] = d_pre.sum(axis=(0, 1))
            d_a = d_pre @ p[f"conv{layer}.w1"].T
            back = d_pre @ p[f"conv{layer}.w0"].T
            if offset < self.d:
                d_a[:, : self.d - offset] += back[:, offset:]
        self._embed_backward(cache.tokens, d_a, grads)
        return {name: grads[name] for name in self.param_names()}

    def forward(self, buffer: TokenBuffer) -> tuple[Matrix, Matrix]:
        """1 系列の並列推論. 呼び出し回数を 1 増やす.

        Returns:
            (log 確率 (d, K), 隠れ表現 (d, H))
        """
        if buffer.d != self.d or buffer.K != self.K:
            raise ShapeMismatchError(f"buffer (d={buffer.d}, K={buffer.K}) does not match model (d={self.d}, K={self.K})")
        cache = self._forward(buffer.tokens[None, :])
        self._count_call()
        return cache.logp[0], cache.hidden[0]

    def forward_many(self, buffers: list[TokenBuffer]) -> list[tuple[Matrix, Matrix]]:
        """複数系列をまとめた 1 回の推論として数える.

        各系列は 1 系列用と同じ形状で評価するので、出力は forward とビット単位で一致する。
        """
        outputs = []
        for buffer in buffers:
            if buffer.d != self.d or buffer.K != self.K:
                raise ShapeMismatchError(f"buffer (d={buffer.d}, K={buffer.K}) does not match model")
            cache = self._forward(buffer.tokens[None, :])
            outputs.append((cache.logp[0], cache.hidden[0]))
        self._count_call()
        return outputs


def arm_forward(model: ArmModel, buffer: TokenBuffer) -> tuple[Matrix, Matrix]:
    """ARM の 1 回の並列推論（呼び出し回数を 1 増やす）."""
    return model.forward(buffer)


def arm_nll(model: ArmModel, x: TokenBuffer) -> float:
    """確定済み系列の負の対数尤度を bits per dimension で返す."""
    if not x.complete:
        raise TokenRangeError(f"buffer is not fully valid (frontier {x.frontier} < d {x.d})")
    logp, _ = model.forward(x)
    picked = logp[np.arange(x.d), x.tokens]
    return float(-picked.mean() / LN2)


def nll_and_grads(model: ArmModel, tokens: np.ndarray) -> tuple[float, dict[str, Matrix], ForwardCache]:
    """バッチの平均 NLL（nats / 次元）とその勾配を計算する.

    Returns:
        (平均 NLL, パラメータ勾配, 順伝播キャッシュ)
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    cache = model._forward(tokens)
    batch, d = tokens.shape
    picked = np.take_along_axis(cache.logp, tokens[..., None], axis=-1)[..., 0]
    loss = float(-picked.mean())
    d_logits = np.exp(cache.logp)
    np.put_along_axis(
        d_logits,
        tokens[..., None],
        np.take_along_axis(d_logits, tokens[..., None], axis=-1) - 1.0,
        axis=-1,
    )
    d_logits /= batch * d
    return loss, model.backward(cache, d_logits), cache


def dataset_bpd(model: ArmModel, tokens: np.ndarray, chunk: int = 256) -> float:
    """系列集合の平均 bpd（呼び出し回数は数えない）."""
    tokens = np.asarray(tokens, dtype=np.int64)
    total = 0.0
    for start in range(0, tokens.shape[0], chunk):
        block = tokens[start : start + chunk]
        cache = model._forward(block)
        picked = np.take_along_axis(cache.logp, block[..., None], axis=-1)[..., 0]
        total += float(-picked.sum())
    return total / (tokens.shape[0] * tokens.shape[1] * LN2)


@dataclass(frozen=True)
class CausalityResult:
    """check_causality の結果. 失敗時は最初に違反した (位置, 試行) と書き換えた位置を持つ."""

    passed: bool
    position: int | None = None
    trial: int | None = None
    perturbed: int | None = None


def check_causality(model: ArmModel, trials: int, rng: Rng) -> CausalityResult:
    """ランダムな 1 位置を書き換えても、それ以前の出力行が変わらないことを確かめる."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if model.K < 2:
        return CausalityResult(True)
    for trial in range(trials):
        tokens = rng.integers(0, model.K, size=model.d)
        j = int(rng.integers(0, model.d))
        perturbed = tokens.copy()
        perturbed[j] = (tokens[j] + 1 + int(rng.integers(0, model.K - 1))) % model.K
        base = model._forward(tokens[None, :])
        other = model._forward(perturbed[None, :])
        for row in range(j + 1):
            same = np.array_equal(base.logp[0, row], other.logp[0, row]) and np.array_equal(
                base.hidden[0, row], other.hidden[0, row]
            )
            if not same:
                logger.warning("因果性違反: 位置 %d（書き換え位置 %d, 試行 %d）", row, j, trial)
                return CausalityResult(False, row, trial, j)
    return CausalityResult(True)
