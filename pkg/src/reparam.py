"""Gumbel-Max による再パラメータ化.

サンプリングの確率性をすべてノイズ格子 ε (d×K) に押し込める。
ノイズを固定すれば、ARM の出力は x_i = argmax_c(μ_{i,c} + ε_{i,c}) という決定的な関数になる。
観測済みの系列から ε を逆算する事後ノイズ（切断 Gumbel）もここで扱う。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.arm import TokenBuffer, TokenRangeError
from src.numeric import Matrix, NonFiniteError, Rng, ShapeMismatchError, logsumexp, uniform_open

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseGrid:
    """位置 × カテゴリの Gumbel ノイズ."""

    eps: Matrix

    def __post_init__(self) -> None:
        eps = np.asarray(self.eps, dtype=np.float64)
        if eps.ndim != 2:
            raise ShapeMismatchError(f"noise grid must be 2-D, got shape {eps.shape}")
        if not np.all(np.isfinite(eps)):
            raise NonFiniteError("non-finite noise")
        object.__setattr__(self, "eps", eps)

    @property
    def d(self) -> int:
        return int(self.eps.shape[0])

    @property
    def K(self) -> int:
        return int(self.eps.shape[1])

    def check_shape(self, d: int, K: int) -> None:
        if (self.d, self.K) != (d, K):
            raise ShapeMismatchError(f"noise grid ({self.d}, {self.K}) does not match model ({d}, {K})")


def _gumbel(u: np.ndarray | float) -> np.ndarray:
    return -np.log(-np.log(u))


def sample_gumbel_grid(rng: Rng, d: int, K: int) -> NoiseGrid:
    """標準 Gumbel ノイズの格子を生成する."""
    if d < 1 or K < 1:
        raise ValueError(f"d and K must be >= 1, got d={d} K={K}")
    return NoiseGrid(_gumbel(uniform_open(rng, (d, K))))


def seeded_noise_grid(seed: int, index: int, d: int, K: int) -> NoiseGrid:
    """(シード, バッチ内番号) から決まるノイズ格子. 実行記録の再生に使う."""
    return sample_gumbel_grid(Rng(seed).derive(f"noise/{index}"), d, K)


def gumbel_argmax(mu: np.ndarray, eps: np.ndarray) -> int:
    """argmax_c(μ_c + ε_c). 同値の場合は最小の添字を返す."""
    mu = np.asarray(mu, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != eps.shape:
        raise ShapeMismatchError(f"mu {mu.shape} and eps {eps.shape} differ")
    scores = mu + eps
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("non-finite gumbel scores")
    return int(np.argmax(scores))


def gumbel_argmax_rows(mu: Matrix, eps: Matrix) -> np.ndarray:
    """行ごとの gumbel_argmax（同じ同値規則）."""
    if mu.shape != eps.shape:
        raise ShapeMismatchError(f"mu {mu.shape} and eps {eps.shape} differ")
    scores = mu + eps
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("non-finite gumbel scores")
    return np.argmax(scores, axis=-1)


def _truncate(g: np.ndarray, truncation: np.ndarray) -> np.ndarray:
    # −log(exp(−g) + exp(−T)) の安定形. T = +inf なら g をそのまま返す
    with np.errstate(invalid="ignore"):
        gap = np.abs(g - truncation)
    gap = np.where(np.isnan(gap), np.inf, gap)
    return np.minimum(g, truncation) - np.log1p(np.exp(-gap))


def sample_truncated_gumbel(
    location: float | np.ndarray,
    truncation: float | np.ndarray,
    rng: Rng,
    size: int | tuple[int, ...] | None = None,
) -> float | np.ndarray:
    """truncation 以下に条件付けた Gumbel(location) の標本.

    最大値安定性により g ~ Gumbel(location) を引き、min(g, T) − log1p(exp(−|g − T|)) を返す。
    結果は常に truncation 以下になる。
    """
    if size is None:
        size = np.broadcast(np.asarray(location), np.asarray(truncation)).shape or None
    g = np.asarray(location, dtype=np.float64) + _gumbel(uniform_open(rng, size))
    result = _truncate(g, np.asarray(truncation, dtype=np.float64))
    if np.ndim(result) == 0:
        return float(result)
    return result


def sample_posterior_noise(
    x: TokenBuffer | np.ndarray,
    mu: Matrix,
    rng: Rng,
    exact_max: bool = False,
) -> NoiseGrid:
    """観測系列 x を Gumbel-Max で再現するノイズを事後分布から引く.

    各位置について、まず x_i の列を引き（乱数は位置ごとに先頭の 1 個）、
    続いて残りのカテゴリを昇順に μ_{i,x_i} + ε_{i,x_i} で切断した Gumbel から引く。
    exact_max が真のとき、最大値を Gumbel(logsumexp μ_i) から引くので、
    x ~ P_ARM と合わせたノイズの周辺分布が標準 Gumbel に一致する。
    既定では ε_{i,x_i} を標準 Gumbel から引く。

    有限精度での丸めにより μ_c + ε_c が切断点に達したセルは、
    切断点を厳密に下回るまで 1 ulp ずつ下げる。

    Raises:
        TokenRangeError: x の要素が [0, K) の外にある場合
    """
    tokens = np.asarray(x.tokens if isinstance(x, TokenBuffer) else x, dtype=np.int64)
    mu = np.asarray(mu, dtype=np.float64)
    d, K = mu.shape
    if tokens.shape != (d,):
        raise ShapeMismatchError(f"tokens {tokens.shape} do not match mu {mu.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= K):
        raise TokenRangeError(f"token outside [0, {K})")

    u = uniform_open(rng, (d, K))
    rows = np.arange(d)
    mu_x = mu[rows, tokens]
    top_noise = _gumbel(u[:, 0])
    if exact_max:
        eps_x = (logsumexp(mu) + top_noise) - mu_x
    else:
        eps_x = top_noise
    eps = np.empty((d, K))
    eps[rows, tokens] = eps_x
    if K == 1:
        return NoiseGrid(eps)

    # 位置ごとに x_i 以外のカテゴリを昇順に並べる
    categories = np.broadcast_to(np.arange(K), (d, K))
    others = categories[categories != tokens[:, None]].reshape(d, K - 1)
    mu_others = np.take_along_axis(mu, others, axis=1)
    top = (mu_x + eps_x)[:, None]
    truncated = _truncate(mu_others + _gumbel(u[:, 1:]), top)
    eps_others = truncated - mu_others
    # μ + ε の再計算で切断点に届いたセルを修正する
    bad = mu_others + eps_others >= top
    repairs = 0
    while np.any(bad):
        eps_others[bad] = np.nextafter(eps_others[bad], -np.inf)
        bad = mu_others + eps_others >= top
        repairs += 1
    if repairs:
        logger.debug("事後ノイズの丸めを %d 回修正した", repairs)
    np.put_along_axis(eps, others, eps_others, axis=1)
    return NoiseGrid(eps)
