import numpy as np
import numpy.testing as npt
import pytest

from larmoe import diffcore as dc
from larmoe import nets


def test_identity_single_layer():
    p = nets.init_mlp([2, 2], seed=0)
    p.weights[0].value = np.eye(2)
    p.biases[0].value = np.zeros(2)
    out = nets.mlp_forward(p, np.array([1.0, -1.0]))
    npt.assert_array_equal(out.value, [1.0, -1.0])


def test_zero_weights_return_bias():
    p = nets.init_mlp([3, 4], seed=0)
    p.weights[0].value = np.zeros((3, 4))
    p.biases[0].value = np.array([0.1, 0.2, 0.3, 0.4])
    for x in (np.zeros(3), np.array([5.0, -2.0, 1.0])):
        npt.assert_array_equal(nets.mlp_forward(p, x).value, [0.1, 0.2, 0.3, 0.4])


def test_two_layer_tanh_matches_hand_computation():
    p = nets.init_mlp([3, 5, 2], activation="tanh", seed=0)
    x = np.ones(3)
    # step the two stages by hand with raw numpy
    h = np.tanh(x @ p.weights[0].value + p.biases[0].value)
    expected = h @ p.weights[1].value + p.biases[1].value
    npt.assert_allclose(nets.mlp_forward(p, x).value, expected, rtol=0, atol=0)


def test_init_deterministic_given_seed():
    a = nets.init_mlp([4, 8, 2], seed=7)
    b = nets.init_mlp([4, 8, 2], seed=7)
    c = nets.init_mlp([4, 8, 2], seed=8)
    for (na, wa), (_, wb) in zip(a.named_params(), b.named_params()):
        npt.assert_array_equal(wa.value, wb.value)
    assert any(
        not np.array_equal(wa.value, wc.value)
        for (_, wa), (_, wc) in zip(a.named_params(), c.named_params())
    )


def test_init_variance_matches_glorot():
    fan_in, fan_out = 1000, 250
    p = nets.init_mlp([fan_in, fan_out], seed=3)
    # variance of uniform(+/-a) is a^2/3 = 2/(fan_in+fan_out)
    target = 2.0 / (fan_in + fan_out)
    assert abs(p.weights[0].value.var() - target) < 0.2 * target


def test_init_rejects_nonpositive_width():
    with pytest.raises(ValueError):
        nets.init_mlp([4, 0, 2])


def test_forward_width_mismatch():
    p = nets.init_mlp([3, 2], seed=0)
    with pytest.raises(dc.ShapeMismatch):
        nets.mlp_forward(p, np.ones(5))


def test_forward_is_pure():
    p = nets.init_mlp([4, 6, 3], seed=1)
    x = np.linspace(-1, 1, 4)
    a = nets.mlp_forward(p, x).value
    b = nets.mlp_forward(p, x).value
    npt.assert_array_equal(a, b)


def test_mlp_gradients_verify():
    p = nets.init_mlp([3, 4, 2], activation="tanh", seed=5)
    x = dc.Node(np.array([0.3, -0.7, 1.1]))
    params = [n for _, n in p.named_params()] + [x]
    report = dc.finite_diff_check(
        lambda: dc.reduce_sum(dc.multiply(nets.mlp_forward(p, x), nets.mlp_forward(p, x))),
        params,
    )
    assert report.max_rel_error <= 1e-4


def test_gate_temperature_initialized():
    g = nets.init_gate(latent_dim=8, n_experts=4, temperature_init=100.0, seed=0)
    assert g.temperature.value == 100.0
    names = [n for n, _ in g.named_params()]
    assert "gate.T" in names


def test_task_table_lookup_and_unknown_id():
    t = nets.init_task_table(4, 3, seed=0)
    rows = t.lookup([2, 0]).value
    npt.assert_array_equal(rows[0], t.table.value[2])
    npt.assert_array_equal(rows[1], t.table.value[0])
    with pytest.raises(nets.UnknownTaskId):
        t.lookup([4])
    with pytest.raises(nets.UnknownTaskId):
        t.lookup([-1])


def test_task_table_gradient_reaches_rows():
    t = nets.init_task_table(3, 2, seed=1)
    out = t.lookup([1])
    dc.backward(dc.reduce_sum(out))
    grad = t.table.grad
    npt.assert_array_equal(grad[1], [1.0, 1.0])
    npt.assert_array_equal(grad[0], [0.0, 0.0])


class TestDecoderExpert:
    def params(self, seed=0):
        return nets.init_decoder_expert(context_dim=6, horizon=4, action_dim=3, model_dim=8, seed=seed)

    def test_attention_weights_are_exactly_one(self):
        p = self.params()
        w = nets.attention_weights(p, np.linspace(-1, 1, 6)).value
        assert w.shape == (4, 1)
        npt.assert_array_equal(w, np.ones((4, 1)))

    def test_zero_output_projection_gives_zero_chunk(self):
        p = self.params()
        p.w_out.value = np.zeros_like(p.w_out.value)
        p.b_out.value = np.zeros_like(p.b_out.value)
        out = nets.decoder_expert_forward(p, np.ones(6)).value
        npt.assert_array_equal(out, np.zeros((4, 3)))

    def test_deterministic_across_calls(self):
        p = self.params(seed=3)
        ctx = np.linspace(0, 1, 6)
        a = nets.decoder_expert_forward(p, ctx).value
        b = nets.decoder_expert_forward(p, ctx).value
        npt.assert_array_equal(a, b)

    def test_output_shape_fixed_regardless_of_context(self):
        p = self.params()
        rng = np.random.default_rng(0)
        for _ in range(5):
            out = nets.decoder_expert_forward(p, rng.normal(size=6))
            assert out.shape == (4, 3)

    def test_batched_matches_single(self):
        p = self.params(seed=2)
        rng = np.random.default_rng(1)
        batch = rng.normal(size=(3, 6))
        batched = nets.decoder_expert_forward(p, batch).value
        for i in range(3):
            single = nets.decoder_expert_forward(p, batch[i]).value
            # BLAS blocking differs between batch shapes; equal to rounding
            npt.assert_allclose(batched[i], single.reshape(-1), rtol=1e-12, atol=1e-15)

    def test_context_width_mismatch(self):
        p = self.params()
        with pytest.raises(dc.ShapeMismatch):
            nets.decoder_expert_forward(p, np.ones(7))

    def test_gradients_verify(self):
        p = self.params(seed=4)
        ctx = dc.Node(np.linspace(-0.5, 0.5, 6))
        trainable = [n for name, n in p.named_params() if name != "wq"]
        report = dc.finite_diff_check(
            lambda: dc.reduce_sum(
                dc.multiply(nets.decoder_expert_forward(p, ctx), nets.decoder_expert_forward(p, ctx))
            ),
            trainable + [ctx],
        )
        assert report.max_rel_error <= 1e-4
