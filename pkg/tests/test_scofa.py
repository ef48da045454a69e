import numpy as np
import pytest

from multifuse.errors import ConfigError
from multifuse.scofa import (
    ChannelAttention,
    CrfBlock,
    DirectionalRNN,
    IrnnBlock,
    Scofa,
    ScofaConfig,
    channel_attention,
    crf_refine,
    irnn_sweep,
    scofa_forward,
)
from multifuse.tensor import Tensor, grad_check, ops


def conv3x3_single(x, k):
    """Zero-padded 3x3 correlation on an [H, W] map."""
    H, W = x.shape
    xp = np.pad(x, 1)
    return np.array([[np.sum(xp[i:i + 3, j:j + 3] * k) for j in range(W)] for i in range(H)])


class TestCrf:
    @pytest.mark.parametrize("K", [1, 2, 3, 5])
    def test_zero_kernel_is_identity(self, K):
        rng = np.random.default_rng(K)
        block = CrfBlock(3, rng, iterations=K)
        block.pairwise.weight.data[:] = 0
        x = Tensor(rng.standard_normal((1, 3, 4, 4)).astype(np.float32))
        assert np.array_equal(crf_refine(x, block).data, x.data)

    def test_one_step_hand_case(self):
        block = CrfBlock(1, np.random.default_rng(0), iterations=1, damping=0.5)
        k = np.array([[0, 1, 0], [1, 2, 1], [0, 1, 0]], np.float32)
        block.pairwise.weight.data = k.reshape(1, 1, 3, 3)
        x = np.array([[1, -1, 2], [0, 3, -2], [1, 1, 1]], np.float32)
        out = crf_refine(Tensor(x.reshape(1, 1, 3, 3)), block).data[0, 0]
        expected = x + 0.5 * conv3x3_single(np.maximum(x, 0), k)
        assert np.allclose(out, expected, atol=1e-6)
        # centre: relu neighbours 0 (up -1), 0, 0 (right -2), 1 (below) and 2*3 at the centre
        assert out[1, 1] == pytest.approx(3 + 0.5 * (0 + 0 + 0 + 1 + 6))

    def test_three_steps_unrolled(self):
        rng = np.random.default_rng(1)
        block = CrfBlock(2, rng, iterations=3, damping=0.3)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        s = x
        for _ in range(3):
            s = x + block.pairwise(ops.relu(s)) * 0.3
        assert np.allclose(block(x).data, s.data, atol=0)


class TestChannelAttention:
    def test_zero_conv_halves(self):
        att = ChannelAttention(3, np.random.default_rng(0))
        att.conv.weight.data[:] = 0
        att.conv.bias.data[:] = 0
        x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 2, 2)).astype(np.float32))
        assert np.allclose(channel_attention(x, att).data, 0.5 * x.data)

    def test_negative_bias_suppresses(self):
        att = ChannelAttention(3, np.random.default_rng(0))
        att.conv.bias.data[:] = -40
        x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 2, 2)).astype(np.float32))
        assert np.abs(att(x).data).max() < 1e-12

    def test_hand_evaluation(self):
        rng = np.random.default_rng(2)
        att = ChannelAttention(3, rng)
        att.conv.weight.data = rng.standard_normal((3, 3, 1, 1)).astype(np.float32)
        att.conv.bias.data = rng.standard_normal(3).astype(np.float32)
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        W = att.conv.weight.data[:, :, 0, 0].astype(np.float64)
        b = att.conv.bias.data.astype(np.float64)
        ref = np.empty((1, 3, 2, 2))
        for i in range(2):
            for j in range(2):
                v = x[0, :, i, j].astype(np.float64)
                ref[0, :, i, j] = v / (1 + np.exp(-(W @ v + b)))
        assert np.abs(att(Tensor(x)).data - ref).max() < 1e-6

    def test_never_amplifies(self):
        rng = np.random.default_rng(3)
        att = ChannelAttention(4, rng)
        att.conv.weight.data = rng.standard_normal((4, 4, 1, 1)).astype(np.float32) * 3
        x = Tensor(rng.standard_normal((1, 4, 5, 5)).astype(np.float32))
        assert np.all(np.abs(att(x).data) <= np.abs(x.data))


class TestIrnn:
    def test_identity_recurrence_running_sum(self):
        rnn = DirectionalRNN(1, np.random.default_rng(0))
        rnn.V.data = np.eye(1, dtype=np.float32)
        x = Tensor(np.ones((1, 1, 3), np.float32))
        assert rnn.sweep(x, "left_to_right").data.ravel().tolist() == [1.0, 2.0, 3.0]
        assert rnn.sweep(x, "right_to_left").data.ravel().tolist() == [3.0, 2.0, 1.0]

    def test_u_starts_at_identity(self):
        block = IrnnBlock(4, 3, np.random.default_rng(0))
        for rnn in block.rnns:
            assert np.array_equal(rnn.U.data, np.eye(3))
        assert block.out_channels == 12

    def test_zero_input_zero_output(self):
        block = IrnnBlock(4, 3, np.random.default_rng(0))
        out = irnn_sweep(Tensor(np.zeros((1, 4, 3, 5), np.float32)), block)
        assert out.shape == (1, 12, 3, 5)
        assert np.all(out.data == 0)

    def test_reflection_symmetry(self):
        rng = np.random.default_rng(1)
        rnn = DirectionalRNN(3, rng)
        x = rng.standard_normal((3, 4, 6)).astype(np.float32)
        lr = rnn.sweep(Tensor(x), "left_to_right").data
        rl = rnn.sweep(Tensor(x[:, :, ::-1].copy()), "right_to_left").data[:, :, ::-1]
        assert np.array_equal(lr, rl)
        tb = rnn.sweep(Tensor(x), "top_to_bottom").data
        bt = rnn.sweep(Tensor(x[:, ::-1].copy()), "bottom_to_top").data[:, ::-1]
        assert np.array_equal(tb, bt)


class TestScofa:
    def test_needs_a_branch(self):
        with pytest.raises(ConfigError):
            ScofaConfig(spatial=False, contextual=False).validate()

    @pytest.mark.parametrize(
        "spatial,contextual,expected",
        [(False, True, 4 * 5), (True, False, 8), (True, True, 8 + 4 * 5)],
    )
    def test_channels(self, spatial, contextual, expected):
        rng = np.random.default_rng(0)
        s = Scofa(4, ScofaConfig(spatial=spatial, contextual=contextual, irnn_channels=5), rng)
        out = scofa_forward(Tensor(rng.standard_normal((1, 4, 3, 3))), Tensor(rng.standard_normal((1, 4, 3, 3))), s)
        assert out.shape[1] == s.out_channels == expected

    def test_grad(self):
        rng = np.random.default_rng(2)
        s = Scofa(4, ScofaConfig(irnn_channels=3), rng)
        fv = Tensor(rng.standard_normal((1, 4, 4, 4)))
        ft = Tensor(rng.standard_normal((1, 4, 4, 4)))
        proj = rng.standard_normal((1, s.out_channels, 4, 4))
        assert grad_check(lambda a, b, *p: (s(a, b) * proj).sum(), [fv, ft] + s.parameters(), probes=10) < 1e-4
