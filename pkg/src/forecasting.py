"""学習型予測モジュール.

オフセット t = 1..T ごとのアフィンヘッドが、最後の有効位置 j の隠れ表現 h_j から
位置 j + t の ARM 分布を予測する。目的関数は ARM 側を定数とみなした KL。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from src.arm import ArmModel, TokenBuffer
from src.numeric import Matrix, Rng, ShapeMismatchError, log_softmax
from src.reparam import NoiseGrid, gumbel_argmax_rows

logger = logging.getLogger(__name__)

# チェックポイントのフラグビット
FLAG_LAST_TOKEN = 1
FLAG_NOISE = 2
FLAG_NO_HIDDEN = 4


class Forecaster:
    """オフセットごとのアフィン予測ヘッドの集まり.

    入力は [h_j (use_hidden のとき), one-hot(x_j) (condition_on_last_token のとき),
    ε_{j+t} (condition_on_noise のとき)] の連結。
    """

    def __init__(
        self,
        K: int,
        hidden: int,
        horizon: int,
        params: dict[str, Matrix] | None = None,
        condition_on_last_token: bool = False,
        condition_on_noise: bool = False,
        use_hidden: bool = True,
    ) -> None:
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        self.K = K
        self.hidden = hidden
        self.horizon = horizon
        self.condition_on_last_token = condition_on_last_token
        self.condition_on_noise = condition_on_noise
        self.use_hidden = use_hidden
        if params is None:
            params = {name: np.zeros(shape) for name, shape in self.param_shapes().items()}
        for name, shape in self.param_shapes().items():
            if name not in params or params[name].shape != shape:
                raise ShapeMismatchError(f"forecaster parameter {name} must have shape {shape}")
        self.params = params

    @classmethod
    def for_model(cls, model: ArmModel, horizon: int, **flags: bool) -> "Forecaster":
        """モデルと形状の揃ったゼロ初期化ヘッドを作る."""
        return cls(model.K, model.hidden, horizon, **flags)

    @property
    def in_dim(self) -> int:
        return (
            self.hidden * self.use_hidden
            + self.K * self.condition_on_last_token
            + self.K * self.condition_on_noise
        )

    @property
    def flags(self) -> int:
        return (
            FLAG_LAST_TOKEN * self.condition_on_last_token
            + FLAG_NOISE * self.condition_on_noise
            + FLAG_NO_HIDDEN * (not self.use_hidden)
        )

    @classmethod
    def from_flags(cls, K: int, hidden: int, horizon: int, flags: int, params: dict[str, Matrix] | None = None) -> "Forecaster":
        return cls(
            K,
            hidden,
            horizon,
            params,
            condition_on_last_token=bool(flags & FLAG_LAST_TOKEN),
            condition_on_noise=bool(flags & FLAG_NOISE),
            use_hidden=not flags & FLAG_NO_HIDDEN,
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for t in range(1, self.horizon + 1):
            shapes[f"head{t}.w"] = (self.in_dim, self.K)
            shapes[f"head{t}.b"] = (self.K,)
        return shapes

    def param_names(self) -> list[str]:
        return list(self.param_shapes())

    def randomize(self, rng: Rng, scale: float = 1.0) -> "Forecaster":
        """検証用にヘッドを乱数で埋める."""
        for name, shape in self.param_shapes().items():
            self.params[name] = rng.normal(scale, shape)
        return self

    def matches(self, model: ArmModel) -> bool:
        return self.K == model.K and self.hidden == model.hidden

    def head_inputs(self, hidden: Matrix, last_tokens: np.ndarray, eps_rows: Matrix | None) -> Matrix:
        """ヘッドへの入力行列 (N, in_dim) を組み立てる."""
        n = last_tokens.shape[0]
        blocks = []
        if self.use_hidden:
            blocks.append(hidden)
        if self.condition_on_last_token:
            blocks.append(np.eye(self.K)[last_tokens])
        if self.condition_on_noise:
            if eps_rows is None:
                raise ShapeMismatchError("noise-conditioned forecaster needs eps rows")
            blocks.append(eps_rows)
        if not blocks:
            return np.zeros((n, 0))
        return np.concatenate(blocks, axis=1)


def forecast_logits(
    forecaster: Forecaster,
    h_row: Matrix,
    last_token: int,
    eps_rows: Matrix | None = None,
) -> Matrix:
    """最後の有効位置の h から T 行の正規化済み log 確率を返す.

    行 t-1 はオフセット t の予測。eps_rows は予測対象位置のノイズ行 (T, K)。
    """
    h_row = np.asarray(h_row, dtype=np.float64)
    if forecaster.use_hidden and h_row.shape != (forecaster.hidden,):
        raise ShapeMismatchError(f"h_row must have shape ({forecaster.hidden},), got {h_row.shape}")
    if eps_rows is not None and eps_rows.shape != (forecaster.horizon, forecaster.K):
        raise ShapeMismatchError(f"eps_rows must have shape ({forecaster.horizon}, {forecaster.K})")
    rows = []
    for t in range(1, forecaster.horizon + 1):
        eps_row = None if eps_rows is None else eps_rows[t - 1 : t]
        inputs = forecaster.head_inputs(h_row[None, :], np.array([last_token]), eps_row)
        logits = inputs @ forecaster.params[f"head{t}.w"] + forecaster.params[f"head{t}.b"]
        rows.append(log_softmax(logits)[0])
    return np.stack(rows)


def forecast_tokens(logit_rows: Matrix, eps_rows: Matrix, use_reparam_noise: bool = True) -> np.ndarray:
    """予測分布と同じノイズ行から予測トークンを決める.

    use_reparam_noise が偽なら ε を使わず予測分布の最頻値を返す。
    """
    if use_reparam_noise:
        return gumbel_argmax_rows(logit_rows, eps_rows)
    return np.argmax(logit_rows, axis=-1)


def kl_categorical(p_logp: np.ndarray, q_logp: np.ndarray) -> float | np.ndarray:
    """KL(p || q) = Σ_c exp(p_c)(p_c − q_c). 最後の軸で和をとり、丸めで負にならないよう 0 で下限を切る."""
    p_logp = np.asarray(p_logp, dtype=np.float64)
    q_logp = np.asarray(q_logp, dtype=np.float64)
    kl = np.maximum(np.sum(np.exp(p_logp) * (p_logp - q_logp), axis=-1), 0.0)
    if np.ndim(kl) == 0:
        return float(kl)
    return kl


@dataclass
class ForecastLoss:
    """KL 予測損失と勾配.

    value は全 (j, t) 対の KL の総和。grads は予測ヘッドの勾配（重みなし）、
    hidden_grad は h に対する勾配（重みなし）。共有表現へ流すときに weight を掛ける。
    """

    value: float
    pairs: int
    weight: float = 0.01
    grads: dict[str, Matrix] = field(default_factory=dict)
    hidden_grad: Matrix | None = None

    @property
    def mean(self) -> float:
        return self.value / self.pairs if self.pairs else 0.0


def _forecast_loss_from_cache(
    forecaster: Forecaster,
    tokens: np.ndarray,
    hidden: Matrix,
    target_logp: Matrix,
    eps: Matrix | None,
    weight: float,
) -> ForecastLoss:
    batch, d = tokens.shape
    total = 0.0
    pairs = 0
    grads = {name: np.zeros(shape) for name, shape in forecaster.param_shapes().items()}
    hidden_grad = np.zeros_like(hidden)
    for t in range(1, forecaster.horizon + 1):
        span = d - t
        if span <= 0:
            continue
        h = hidden[:, :span].reshape(-1, hidden.shape[-1])
        last = tokens[:, :span].ravel()
        eps_rows = None if eps is None else eps[:, t:].reshape(-1, forecaster.K)
        inputs = forecaster.head_inputs(h, last, eps_rows)
        w = forecaster.params[f"head{t}.w"]
        q = log_softmax(inputs @ w + forecaster.params[f"head{t}.b"])
        p = target_logp[:, t:].reshape(-1, forecaster.K)
        total += float(np.sum(kl_categorical(p, q)))
        pairs += p.shape[0]
        d_logits = np.exp(q) - np.exp(p)
        grads[f"head{t}.w"] = inputs.T @ d_logits
        grads[f"head{t}.b"] = d_logits.sum(axis=0)
        if forecaster.use_hidden:
            d_h = d_logits @ w[: forecaster.hidden].T
            hidden_grad[:, :span] += d_h.reshape(batch, span, -1)
    return ForecastLoss(total, pairs, weight, grads, hidden_grad)


def forecaster_loss(
    model: ArmModel,
    forecaster: Forecaster,
    x: TokenBuffer | np.ndarray,
    eps: NoiseGrid | Matrix | None = None,
    target_logp: Matrix | None = None,
    weight: float = 0.01,
) -> ForecastLoss:
    """教師強制の順伝播で j + t < d の全対について KL を合計する.

    ARM の分布は定数として扱う（target_logp を渡せばそれを使う）。
    x はバッファ 1 本か (B, d) のトークン配列、eps は対応するノイズ（(d, K) または (B, d, K)）。
    """
    tokens = np.asarray(x.tokens if isinstance(x, TokenBuffer) else x, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if not forecaster.matches(model):
        raise ShapeMismatchError("forecaster does not match model (K, H)")
    cache = model._forward(tokens)
    if target_logp is None:
        target_logp = cache.logp
    target_logp = np.asarray(target_logp, dtype=np.float64).reshape(cache.logp.shape)
    eps_array = None
    if forecaster.condition_on_noise:
        if eps is None:
            raise ShapeMismatchError("noise-conditioned forecaster needs eps")
        eps_array = np.asarray(eps.eps if isinstance(eps, NoiseGrid) else eps, dtype=np.float64)
        eps_array = eps_array.reshape(cache.logp.shape)
    return _forecast_loss_from_cache(forecaster, tokens, cache.hidden, target_logp, eps_array, weight)
