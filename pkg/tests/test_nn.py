import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, random_case, rel_error
from sgan.errors import ConfigError, ContractError, TrainingError, UsageError
from sgan.nn import (MlpSpec, ParamStore, backward, build_net, clone_params, forward,
                     grad_norm_penalty, leaky_relu, make_optimizer, mlp_init, optimizer_step)


def _single_layer(w, b, head="linear"):
    spec = MlpSpec((len(w[0]), len(w)), 0.01, head)
    return spec, ParamStore([(np.array(w, dtype=float), np.array(b, dtype=float))])


class TestSpecAndInit:
    def test_generator_shapes(self):
        params = mlp_init(MlpSpec((100, 512, 512, 512, 2)), seed=0)
        assert [w.shape for w, _ in params.layers] == [(512, 100), (512, 512), (512, 512), (2, 512)]

    def test_discriminator_shapes(self):
        params = mlp_init(MlpSpec((2, 512, 512, 512, 1), output_head="sigmoid"), seed=0)
        assert [w.shape for w, _ in params.layers] == [(512, 2), (512, 512), (512, 512), (1, 512)]

    def test_init_deterministic(self):
        spec = MlpSpec((3, 7, 2))
        assert mlp_init(spec, 5).checksum() == mlp_init(spec, 5).checksum()
        assert mlp_init(spec, 5).checksum() != mlp_init(spec, 6).checksum()

    def test_init_bounds_and_zero_bias(self):
        params = mlp_init(MlpSpec((16, 64, 1)), 1)
        for w, b in params.layers:
            assert np.all(np.abs(w) <= 1 / np.sqrt(w.shape[1]))
            assert not b.any()

    @pytest.mark.parametrize("kwargs", [
        dict(layer_sizes=(3,)),
        dict(layer_sizes=(3, 0, 1)),
        dict(layer_sizes=(3, 1), activation_slope=0.0),
        dict(layer_sizes=(3, 1), activation_slope=1.0),
        dict(layer_sizes=(3, 1), output_head="tanh"),
    ])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ConfigError):
            MlpSpec(**kwargs)


def test_leaky_relu_values():
    assert leaky_relu(3.0, 0.01) == 3.0
    assert leaky_relu(-1.0, 0.01) == pytest.approx(-0.01)
    assert leaky_relu(0.0, 0.01) == 0.0
    np.testing.assert_array_equal(leaky_relu(np.array([-2.0, 2.0]), 0.5), [-1.0, 2.0])


class TestForward:
    def test_zero_net_linear(self):
        spec = MlpSpec((3, 4, 2))
        params = mlp_init(spec, 0).scale(0.0)
        out, _ = forward(params, spec, np.ones((5, 3)))
        assert not out.any()

    def test_zero_net_sigmoid(self):
        spec = MlpSpec((3, 4, 1), output_head="sigmoid")
        params = mlp_init(spec, 0).scale(0.0)
        out, _ = forward(params, spec, np.random.default_rng(0).normal(size=(5, 3)))
        np.testing.assert_array_equal(out, 0.5)

    def test_hand_linear(self):
        spec, params = _single_layer([[1, 1]], [0])
        out, _ = forward(params, spec, np.array([[0.25, 0.5]]))
        assert out[0, 0] == pytest.approx(0.75)

    def test_shape_mismatch(self):
        spec, params = _single_layer([[1, 1]], [0])
        with pytest.raises(ContractError):
            forward(params, spec, np.zeros((2, 3)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3))
    def test_sigmoid_range(self, seed, scale):
        rng = np.random.default_rng(seed)
        spec = MlpSpec((2, 5, 1), 0.01, "sigmoid")
        params = mlp_init(spec, seed)
        out, _ = forward(params, spec, scale * rng.normal(size=(4, 2)))
        assert np.all((out > 0) & (out < 1))


class TestBackward:
    def test_linear_input_grads(self):
        spec, params = _single_layer([[1, 1]], [0])
        _, tape = forward(params, spec, np.array([[0.3, -2.0], [1.0, 4.0]]))
        _, gx = backward(tape, 1.0)
        np.testing.assert_array_equal(gx, [[1, 1], [1, 1]])

    def test_double_backward_rejected(self):
        spec, params = _single_layer([[1, 1]], [0])
        _, tape = forward(params, spec, np.zeros((1, 2)))
        backward(tape, 1.0)
        with pytest.raises(UsageError):
            backward(tape, 1.0)

    def test_unused_block_has_zero_grad(self):
        # a zero last-layer weight cuts every earlier block off from the loss
        spec = MlpSpec((3, 4, 4, 1))
        params = mlp_init(spec, 2)
        params.layers[2][0][:] = 0.0
        _, tape = forward(params, spec, np.ones((3, 3)))
        grads, _ = backward(tape, 1.0)
        for w, b in grads.layers[:2]:
            assert not w.any() and not b.any()

    def test_no_mutation(self):
        rng = np.random.default_rng(3)
        spec, params, x = random_case(rng)
        before = params.checksum()
        out, tape = forward(params, spec, x)
        backward(tape, rng.normal(size=out.shape))
        assert params.checksum() == before

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec, params, x = random_case(rng)
        out, tape = forward(params, spec, x)
        r = rng.normal(size=out.shape)
        grads, gx = backward(tape, r)

        def loss():
            return float((forward(params, spec, x)[0] * r).sum())

        for (w, b), (gw, gb) in zip(params.layers, grads.layers):
            assert rel_error(gw, numeric_grad(loss, w)) < 1e-4
            assert rel_error(gb, numeric_grad(loss, b)) < 1e-4
        assert rel_error(gx, numeric_grad(loss, x)) < 1e-4


class TestPenalty:
    def test_unit_weight_zero_penalty(self):
        spec, params = _single_layer([[1, 0]], [0.3])
        pen, _ = grad_norm_penalty(params, spec, np.random.default_rng(0).normal(size=(7, 2)), 1.0)
        assert pen == pytest.approx(0.0, abs=1e-12)

    def test_norm_five(self):
        spec, params = _single_layer([[3, 4]], [0])
        pen, _ = grad_norm_penalty(params, spec, np.random.default_rng(0).normal(size=(7, 2)), 1.0)
        assert pen == pytest.approx(16.0, abs=1e-9)

    def test_zero_gradient_is_finite(self):
        spec, params = _single_layer([[0, 0]], [0])
        pen, tape = grad_norm_penalty(params, spec, np.ones((3, 2)), 1.0)
        assert pen == pytest.approx(1.0, abs=1e-5)
        assert tape.backward().is_finite()

    @pytest.mark.parametrize("seed", range(6))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        spec, params, x = random_case(rng, scalar_out=True)
        _, tape = grad_norm_penalty(params, spec, x, 1.0)
        grads = tape.backward()

        def pen():
            return grad_norm_penalty(params, spec, x, 1.0)[0]

        for (w, b), (gw, gb) in zip(params.layers, grads.layers):
            assert rel_error(np.concatenate([gw.ravel(), gb]),
                             np.concatenate([numeric_grad(pen, w).ravel(), numeric_grad(pen, b)])) < 1e-3


class TestOptimizer:
    def _store(self, value=0.0):
        return ParamStore([(np.full((2, 3), value), np.full(2, value))])

    def test_zero_gradient_identity(self):
        params = ParamStore([(np.arange(6.0).reshape(2, 3), np.ones(2))])
        for kind in ("adam", "rmsprop"):
            p = params.copy()
            state = make_optimizer(kind, p, 1e-3)
            optimizer_step(state, p, p.zeros_like())
            assert p.equals(params)
            assert state.step_count == 1

    def test_adam_first_step(self):
        p = self._store(0.0)
        state = make_optimizer("adam", p, 1e-5, beta1=0.5, beta2=0.999, eps=1e-8)
        optimizer_step(state, p, self._store(1.0))
        np.testing.assert_allclose(p.flat(), -1e-5 / (1 + 1e-8), rtol=1e-12)

    def test_rmsprop_first_step(self):
        p = self._store(0.0)
        state = make_optimizer("rmsprop", p, 1e-3, decay=0.99, eps=1e-8)
        optimizer_step(state, p, self._store(2.0))
        # v = 0.01 * 4 = 0.04, step = lr * 2 / (0.2 + eps)
        np.testing.assert_allclose(p.flat(), -1e-3 * 2 / (0.2 + 1e-8), rtol=1e-12)

    def test_momentum_nonlinearity(self):
        rng = np.random.default_rng(0)
        g = ParamStore([(rng.normal(size=(2, 3)), rng.normal(size=2))])
        p1, p2 = self._store(), self._store()
        s1, s2 = make_optimizer("adam", p1, 1e-2), make_optimizer("adam", p2, 1e-2)
        optimizer_step(s1, p1, g)
        optimizer_step(s1, p1, g)
        optimizer_step(s2, p2, g.copy().scale(2.0))
        assert not np.allclose(p1.flat(), p2.flat())

    def test_non_finite_gradient(self):
        p = self._store()
        state = make_optimizer("adam", p, 1e-3)
        bad = self._store(np.nan)
        with pytest.raises(TrainingError) as exc:
            optimizer_step(state, p, bad, context={"iteration": 7, "pair_index": 2})
        assert exc.value.iteration == 7 and exc.value.pair_index == 2
        assert state.step_count == 0

    def test_moments_start_at_zero(self):
        state = make_optimizer("adam", self._store(1.0), 1e-3)
        assert not state.first_moment.flat().any() and not state.second_moment.flat().any()


class TestClone:
    def test_isolation(self):
        net = build_net(MlpSpec((2, 4, 1)), 0, "adam", 1e-2)
        clone = net.clone()
        source_sum = net.checksum()
        assert clone.checksum() == source_sum
        clone.step(ParamStore([(np.ones_like(w), np.ones_like(b)) for w, b in clone.params.layers]))
        assert net.checksum() == source_sum
        assert clone.checksum() != source_sum

    def test_clone_of_clone(self):
        net = build_net(MlpSpec((2, 4, 1)), 0)
        a = net.clone()
        assert a.clone().checksum() == a.checksum()

    def test_clone_params(self):
        spec = MlpSpec((3, 5, 2))
        params = mlp_init(spec, 9)
        state = make_optimizer("rmsprop", params, 1e-3)
        p2, s2 = clone_params(params, state)
        assert p2.equals(params)
        p2.layers[0][0][0, 0] += 1
        s2.second_moment.layers[0][0][0, 0] = 5
        assert not p2.equals(params)
        assert not state.second_moment.layers[0][0].any()
