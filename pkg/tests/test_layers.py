import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from layers import (
    ConvBlock,
    Dense,
    GruCell,
    SmbBlock,
    avg_pool1d,
    conv1d,
    conv1d_block,
    fc,
    gru_layer,
    gru_step,
    pool_matrix,
    smb_forward,
    window_matrix,
)
from tensor import ContractError, DimensionError


def _zero_cell(d_in, d_g, rng):
    cell = GruCell("gru", d_in, d_g, rng)
    for p in cell.parameters():
        p.value = np.zeros_like(p.value)
    return cell


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestGru:
    def test_zero_weight_closed_form(self, rng):
        cell = _zero_cell(1, 1, rng)
        h = gru_step(cell, np.array([0.7]), np.array([1.0]))
        assert_allclose(h.data, [0.5])

    def test_zero_state_closed_form(self, rng):
        cell = GruCell("gru", 3, 4, rng)
        for g in cell.GATES:
            cell.U[g].value = np.zeros((4, 4))
            cell.b[g].value = np.zeros(4)
        cell.W["z"].value = np.zeros((3, 4))
        x = rng.standard_normal(3)
        h = gru_step(cell, x, np.zeros(4))
        assert_allclose(h.data, 0.5 * np.tanh(x @ cell.W["h"].value), atol=1e-12)

    def test_step_matches_loop_oracle(self, rng):
        cell = GruCell("gru", 3, 2, rng)
        for g in cell.GATES:
            cell.b[g].value = rng.standard_normal(2)
        x, h_prev = rng.standard_normal(3), rng.standard_normal(2)
        W = {g: cell.W[g].value for g in cell.GATES}
        U = {g: cell.U[g].value for g in cell.GATES}
        b = {g: cell.b[g].value for g in cell.GATES}
        r = _sigmoid(x @ W["r"] + h_prev @ U["r"] + b["r"])
        z = _sigmoid(x @ W["z"] + h_prev @ U["z"] + b["z"])
        candidate = np.tanh(x @ W["h"] + (h_prev * r) @ U["h"] + b["h"])
        expected = (1 - z) * h_prev + z * candidate
        assert_allclose(gru_step(cell, x, h_prev).data, expected, atol=1e-12)

    def test_layer_matches_repeated_steps(self, rng):
        cell = GruCell("gru", 2, 3, rng)
        seq = rng.standard_normal((2, 5, 2))
        states = gru_layer(cell, seq).data
        h = np.zeros((2, 3))
        for t in range(5):
            h = gru_step(cell, seq[:, t], h).data
            assert_allclose(states[:, t], h, atol=1e-12)

    def test_zero_weight_layer_stays_at_zero(self, rng):
        cell = _zero_cell(2, 3, rng)
        states = gru_layer(cell, rng.standard_normal((6, 2)))
        assert_array_equal(states.data, np.zeros((6, 3)))

    def test_constant_input_converges(self, rng):
        cell = GruCell("gru", 3, 4, rng)
        for p in cell.parameters():
            p.value = 0.1 * p.value
        seq = np.tile(rng.standard_normal(3), (12, 1))
        states = gru_layer(cell, seq).data
        steps = [np.linalg.norm(states[t] - states[t - 1]) for t in range(1, 12)]
        for t in range(3, len(steps)):
            assert steps[t] < steps[t - 1]

    def test_empty_sequence(self, rng):
        with pytest.raises(ContractError):
            gru_layer(GruCell("gru", 2, 3, rng), np.zeros((0, 2)))

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            gru_step(GruCell("gru", 2, 3, rng), np.zeros(3), np.zeros(3))


class TestConv:
    def test_identity_kernel_with_unit_statistics(self, rng):
        block = ConvBlock("conv", 3, 3, 1, rng, eps=0.0)
        block.kernel.value = np.eye(3)[None]
        seq = rng.standard_normal((2, 5, 3))
        out = conv1d_block(block, seq, training=False)
        assert_allclose(out.data, np.maximum(seq, 0.0))

    def test_zero_kernel_gives_zeros(self, rng):
        block = ConvBlock("conv", 2, 4, 3, rng)
        block.kernel.value = np.zeros_like(block.kernel.value)
        out = conv1d_block(block, rng.standard_normal((5, 2)), training=False)
        assert_array_equal(out.data, np.zeros((5, 4)))

    @pytest.mark.parametrize("window", [1, 2, 3, 4])
    def test_same_padding_matches_loop_oracle(self, rng, window):
        kernel = rng.standard_normal((window, 2, 3))
        bias = rng.standard_normal(3)
        seq = rng.standard_normal((6, 2))
        left = (window - 1) // 2
        expected = np.tile(bias, (6, 1))
        for t in range(6):
            for k in range(window):
                src = t + k - left
                if 0 <= src < 6:
                    expected[t] += seq[src] @ kernel[k]
        assert_allclose(conv1d(kernel, bias, seq).data, expected, atol=1e-12)

    def test_training_updates_running_statistics(self, rng):
        block = ConvBlock("conv", 2, 2, 1, rng)
        block.kernel.value = np.eye(2)[None]
        seq = rng.standard_normal((3, 4, 2)) + 5.0
        conv1d_block(block, seq, training=True)
        assert_allclose(block.running_mean, 0.1 * seq.mean(axis=(0, 1)))
        assert_allclose(block.running_var, 0.9 + 0.1 * seq.var(axis=(0, 1)))

    def test_input_width_mismatch(self, rng):
        block = ConvBlock("conv", 2, 2, 3, rng)
        with pytest.raises(DimensionError):
            conv1d_block(block, np.zeros((4, 3)))


class TestPooling:
    def test_identity_pool(self, rng):
        seq = rng.standard_normal((5, 2))
        assert_allclose(avg_pool1d(seq, 1).data, seq)

    def test_window_means(self):
        seq = np.array([[1.0], [2.0], [3.0], [4.0]])
        assert_allclose(avg_pool1d(seq, 2).data, [[1.5], [3.5]])

    def test_ragged_tail(self):
        seq = np.arange(1.0, 6.0).reshape(5, 1)
        assert_allclose(avg_pool1d(seq, 2).data, [[1.5], [3.5], [5.0]])

    def test_pool_larger_than_series(self):
        seq = np.arange(1.0, 4.0).reshape(3, 1)
        assert_allclose(avg_pool1d(seq, 10).data, [[2.0]])

    @pytest.mark.parametrize("pool", [1, 2, 3, 4, 6, 12])
    def test_global_mean_is_preserved(self, rng, pool):
        seq = rng.standard_normal((12, 3))
        assert_allclose(avg_pool1d(seq, pool).data.mean(axis=0), seq.mean(axis=0), atol=1e-12)

    def test_cached_matrices_are_read_only(self):
        with pytest.raises(ValueError):
            pool_matrix(4, 2)[0, 0] = 3.0

    def test_window_matrix_truncates_at_edges(self):
        m = window_matrix(4, 3)
        assert_allclose(m[0], [0.5, 0.5, 0, 0])
        assert_allclose(m[1], [1 / 3, 1 / 3, 1 / 3, 0])


class TestSmb:
    def test_zero_weights_halve_the_input(self, rng):
        block = SmbBlock("smb", 4, 3, rng)
        for p in block.parameters():
            p.value = np.zeros_like(p.value)
        h = rng.standard_normal((6, 4))
        out, s = smb_forward(block, h)
        assert_array_equal(s.data, np.full((6, 4), 0.5))
        assert_array_equal(out.data, 0.5 * h)

    def test_saturated_weights_pass_input_through(self, rng):
        block = SmbBlock("smb", 3, 3, rng)
        block.fc_up.W.value = np.zeros_like(block.fc_up.W.value)
        block.fc_up.b.value = np.full(3, 1e3)
        h = rng.standard_normal((5, 3))
        out, _ = smb_forward(block, h)
        assert_allclose(out.data, h, atol=1e-6)

    def test_hand_set_weights_match_loop_oracle(self, rng):
        block = SmbBlock("smb", 2, 3, rng)
        block.fc_down.W.value = np.array([[0.8], [-0.3]])
        block.fc_down.b.value = np.array([0.1])
        block.fc_up.W.value = np.array([[1.5, -2.0]])
        block.fc_up.b.value = np.array([0.2, 0.4])
        h = np.array([[1.0, -2.0], [0.5, 3.0], [-1.0, 0.0], [2.0, 1.0]])
        expected_s = np.zeros((4, 2))
        for i in range(4):
            window = range(max(0, i - 1), min(4, i + 2))
            s_h = [sum(h[t][j] for t in window) / len(window) for j in range(2)]
            s_v = max(0.0, s_h[0] * 0.8 + s_h[1] * -0.3 + 0.1)
            for j, (w, b) in enumerate(((1.5, 0.2), (-2.0, 0.4))):
                expected_s[i][j] = 1.0 / (1.0 + np.exp(-(s_v * w + b)))
        out, s = smb_forward(block, h)
        assert_allclose(s.data, expected_s, rtol=0, atol=1e-12)
        assert_allclose(out.data, h * expected_s, rtol=0, atol=1e-12)

    def test_weights_lie_in_unit_interval(self, rng):
        block = SmbBlock("smb", 4, 3, rng)
        _, s = smb_forward(block, 3.0 * rng.standard_normal((2, 7, 4)))
        assert np.all((s.data > 0) & (s.data < 1))

    def test_reduction_width(self, rng):
        assert SmbBlock("smb", 8, 3, rng).reduction == 2
        assert SmbBlock("smb", 2, 3, rng).reduction == 1

    def test_window_must_be_positive(self, rng):
        with pytest.raises(ContractError):
            SmbBlock("smb", 4, 0, rng)


class TestFc:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        assert_allclose(fc(np.eye(4), np.zeros(4), x).data, x)

    def test_zero_input_gives_activated_bias(self):
        b = np.array([-1.0, 0.0, 2.0])
        out = fc(np.ones((2, 3)), b, np.zeros((4, 2)), "relu")
        assert_allclose(out.data, np.tile([0.0, 0.0, 2.0], (4, 1)))

    def test_dense_layer_shape(self, rng):
        dense = Dense("fc", 4, 2, rng)
        assert dense(rng.standard_normal((3, 5, 4)), "tanh").shape == (3, 5, 2)

    def test_unknown_activation(self, rng):
        with pytest.raises(ContractError):
            fc(np.eye(2), np.zeros(2), np.ones((1, 2)), "softplus")

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            fc(np.eye(3), np.zeros(3), np.ones((1, 2)))
