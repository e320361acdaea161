"""src/arm.py のテスト."""

import math

import numpy as np
import pytest

from src.arm import (
    ArmModel,
    TokenBuffer,
    TokenRangeError,
    arm_forward,
    arm_nll,
    check_causality,
    dataset_bpd,
    nll_and_grads,
)
from src.numeric import Rng, ShapeMismatchError, finite_diff_check
from tests.models import UnmaskedModel, make_alternating_model, make_constant_model


def _make_model(d=8, K=3, seed=0, zero_output=False, cls=ArmModel):
    model = ArmModel.initialize(d, K, Rng(seed), hidden=8, embed=4, layers=3, zero_output=zero_output)
    if cls is ArmModel:
        return model
    return cls(model.d, model.K, model.hidden, model.embed, model.layers, model.params)


class TestTokenBuffer:
    """TokenBuffer のテストケース."""

    def test_zeros(self):
        """全 0 で frontier 0 のバッファを作る."""
        buffer = TokenBuffer.zeros(4, 3)
        assert buffer.d == 4
        assert buffer.frontier == 0
        assert not buffer.complete
        assert np.array_equal(buffer.tokens, np.zeros(4))

    def test_full(self):
        """full は全要素が確定済みのバッファ."""
        assert TokenBuffer.full(np.array([1, 0, 2]), 3).complete

    def test_advance_cannot_retreat(self):
        """frontier は後退できない."""
        buffer = TokenBuffer.zeros(4, 2)
        buffer.advance(2)
        with pytest.raises(TokenRangeError):
            buffer.advance(1)
        with pytest.raises(TokenRangeError):
            buffer.advance(5)

    def test_write_rejects_out_of_range(self):
        """[0, K) の外の値は書けない."""
        buffer = TokenBuffer.zeros(4, 2)
        with pytest.raises(TokenRangeError):
            buffer.write(0, 2)

    def test_construction_validates_tokens(self):
        """範囲外のトークンや frontier ではバッファを作れない."""
        with pytest.raises(TokenRangeError):
            TokenBuffer(np.array([0, 3]), 3)
        with pytest.raises(TokenRangeError):
            TokenBuffer(np.array([0, 1]), 3, frontier=3)

    def test_copy_is_independent(self):
        """copy の書き換えは元に影響しない."""
        buffer = TokenBuffer.zeros(3, 2)
        other = buffer.copy()
        other.write(0, 1)
        assert buffer.tokens[0] == 0


class TestForward:
    """ArmModel.forward のテストケース."""

    def test_rows_are_normalized(self):
        """全行の確率の和が 1 になる."""
        model = _make_model()
        logp, hidden = model.forward(TokenBuffer(Rng(1).integers(0, 3, 8), 3))
        assert logp.shape == (8, 3)
        assert hidden.shape == (8, 8)
        np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-9)

    def test_zero_output_is_uniform(self):
        """出力射影が 0 なら全位置で一様分布になる."""
        model = _make_model(K=4, zero_output=True)
        logp, _ = model.forward(TokenBuffer(Rng(2).integers(0, 4, 8), 4))
        np.testing.assert_allclose(logp, -math.log(4.0), atol=1e-15)

    def test_single_position_ignores_input(self):
        """d = 1 では入力に関係なく同じ行になる."""
        model = _make_model(d=1, K=3)
        rows = [model.forward(TokenBuffer(np.array([v]), 3))[0] for v in range(3)]
        assert np.array_equal(rows[0], rows[1])
        assert np.array_equal(rows[0], rows[2])

    def test_rows_before_change_are_bitwise_equal(self):
        """位置 j を書き換えても行 0..j はビット単位で変わらない."""
        model = _make_model(d=16, K=3)
        rng = Rng(3)
        for _ in range(20):
            tokens = rng.integers(0, 3, 16)
            j = int(rng.integers(0, 16))
            changed = tokens.copy()
            changed[j] = (tokens[j] + 1) % 3
            a, ha = model.forward(TokenBuffer(tokens, 3))
            b, hb = model.forward(TokenBuffer(changed, 3))
            assert np.array_equal(a[: j + 1], b[: j + 1])
            assert np.array_equal(ha[: j + 1], hb[: j + 1])

    def test_counts_calls(self):
        """forward は 1 回ずつ、forward_many はまとめて 1 回と数える."""
        model = _make_model()
        buffers = [TokenBuffer.zeros(8, 3) for _ in range(5)]
        arm_forward(model, buffers[0])
        model.forward(buffers[1])
        assert model.calls == 2
        model.forward_many(buffers)
        assert model.calls == 3
        model.reset_calls()
        assert model.calls == 0

    def test_forward_many_matches_forward(self):
        """forward_many の各出力は forward とビット単位で一致する."""
        model = _make_model()
        rng = Rng(4)
        buffers = [TokenBuffer(rng.integers(0, 3, 8), 3) for _ in range(4)]
        many = model.forward_many(buffers)
        for buffer, (logp, hidden) in zip(buffers, many):
            single_logp, single_hidden = model.forward(buffer)
            assert np.array_equal(logp, single_logp)
            assert np.array_equal(hidden, single_hidden)

    def test_shape_mismatch_raises(self):
        """長さや K の違うバッファはエラーになる."""
        model = _make_model()
        with pytest.raises(ShapeMismatchError):
            model.forward(TokenBuffer.zeros(7, 3))
        with pytest.raises(ShapeMismatchError):
            model.forward(TokenBuffer.zeros(8, 4))

    def test_copy_is_independent(self):
        """copy したモデルのパラメータ変更は元に影響しない."""
        model = _make_model()
        other = model.copy()
        other.params["out.b"][0] += 1.0
        assert model.params["out.b"][0] != other.params["out.b"][0]

    def test_initialize_is_deterministic(self):
        """同じシードからは同じパラメータになる."""
        a = _make_model(seed=5)
        b = _make_model(seed=5)
        for name in a.param_names():
            assert np.array_equal(a.params[name], b.params[name])

    def test_param_order(self):
        """パラメータの並びは start, embedding, 各層, 出力の順."""
        names = _make_model().param_names()
        assert names[:2] == ["start", "embedding"]
        assert names[2:5] == ["conv0.w0", "conv0.w1", "conv0.b"]
        assert names[-2:] == ["out.w", "out.b"]

    def test_missing_parameter_raises(self):
        """パラメータが欠けているとモデルを作れない."""
        model = _make_model()
        params = dict(model.params)
        del params["out.b"]
        with pytest.raises(ShapeMismatchError):
            ArmModel(8, 3, 8, 4, 3, params)


class TestArmNll:
    """arm_nll / dataset_bpd のテストケース."""

    def test_uniform_binary_is_one_bit(self):
        """一様な 2 値モデルの bpd は 1."""
        model = make_constant_model(8, 2)
        assert arm_nll(model, TokenBuffer.full(Rng(0).integers(0, 2, 8), 2)) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_256_is_eight_bits(self):
        """一様な 256 値モデルの bpd は 8."""
        model = make_constant_model(4, 256)
        assert arm_nll(model, TokenBuffer.full(np.array([0, 17, 255, 3]), 256)) == pytest.approx(8.0, abs=1e-12)

    def test_hand_computed_chain(self):
        """1 層の手組みモデルで、3 トークン系列の連鎖律を手計算と比べる."""
        # logit 差 2 の交互モデルでは各位置の予測が確率 σ(2) で当たる
        model = make_alternating_model(3, gap=2.0)
        sigma = 1.0 / (1.0 + math.exp(-2.0))
        expected = -math.log2(sigma)
        assert arm_nll(model, TokenBuffer.full(np.array([1, 0, 1]), 2)) == pytest.approx(expected, abs=1e-12)
        # 外れる位置を 1 つ含む系列
        mixed = (-2 * math.log2(sigma) - math.log2(1.0 - sigma)) / 3
        assert arm_nll(model, TokenBuffer.full(np.array([1, 1, 0]), 2)) == pytest.approx(mixed, abs=1e-12)

    def test_requires_complete_buffer(self):
        """確定していないバッファはエラーになる."""
        model = make_constant_model(4, 2)
        with pytest.raises(TokenRangeError):
            arm_nll(model, TokenBuffer.zeros(4, 2))

    def test_dataset_bpd_matches_per_item(self):
        """dataset_bpd は系列ごとの arm_nll の平均と一致し、呼び出し回数を数えない."""
        model = _make_model(d=6, K=2)
        tokens = Rng(3).integers(0, 2, (10, 6))
        expected = np.mean([arm_nll(model, TokenBuffer.full(row, 2)) for row in tokens])
        model.reset_calls()
        assert dataset_bpd(model, tokens, chunk=3) == pytest.approx(expected, abs=1e-12)
        assert model.calls == 0


class TestGradients:
    """nll_and_grads の勾配検査."""

    def test_all_parameters(self):
        """全パラメータの解析的勾配が中心差分と 1e-4 以内で一致する."""
        model = _make_model(d=8, K=3, seed=1)
        tokens = Rng(2).integers(0, 3, (2, 8))
        _, grads, _ = nll_and_grads(model, tokens)
        for name in model.param_names():
            original = model.params[name]

            def loss(values, name=name):
                model.params[name] = values
                return nll_and_grads(model, tokens)[0]

            error = finite_diff_check(loss, original.copy(), grads[name], rng=Rng(3))
            model.params[name] = original
            assert error < 1e-4, name

    def test_loss_is_mean_nats(self):
        """損失は平均 NLL（nats）で、bpd の ln 2 倍."""
        model = _make_model(d=6, K=2)
        tokens = Rng(0).integers(0, 2, (4, 6))
        loss, _, _ = nll_and_grads(model, tokens)
        assert loss == pytest.approx(dataset_bpd(model, tokens) * math.log(2.0), abs=1e-12)


class TestCheckCausality:
    """check_causality のテストケース."""

    def test_reference_model_passes(self):
        """参照モデルは 100 試行すべてで通る."""
        assert check_causality(_make_model(d=12), 100, Rng(0)).passed

    def test_unmasked_model_fails(self):
        """入力をずらさないモデルは違反として検出され、位置は書き換え位置以下になる."""
        model = _make_model(d=12, cls=UnmaskedModel)
        result = check_causality(model, 100, Rng(0))
        assert not result.passed
        assert result.position is not None
        assert result.position <= result.perturbed

    def test_single_position_passes(self):
        """d = 1 の参照モデルも通る."""
        assert check_causality(_make_model(d=1), 10, Rng(0)).passed

    def test_does_not_count_calls(self):
        """因果性検査は呼び出し回数に含めない."""
        model = _make_model()
        check_causality(model, 5, Rng(0))
        assert model.calls == 0

    def test_invalid_trials(self):
        """trials < 1 はエラーになる."""
        with pytest.raises(ValueError):
            check_causality(_make_model(), 0, Rng(0))
