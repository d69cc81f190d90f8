import numpy as np
import pytest

from rectiflow.autograd import Tensor
from rectiflow.errors import ConfigError, DimensionError
from rectiflow.flow import _flow_loss_tensor
from rectiflow.gradcheck import finite_difference_check
from rectiflow.vectorfield import Adam, VectorFieldModel, embed_times, time_embed


class TestTimeEmbed:
    def test_t_zero_gives_zero_sines_unit_cosines(self):
        emb = time_embed(0.0, 8)
        assert np.all(emb[:4] == 0.0)
        assert np.all(emb[4:] == 1.0)

    def test_components_bounded(self):
        for t in np.linspace(0, 1, 23):
            emb = time_embed(float(t), 16)
            assert np.all(np.abs(emb) <= 1.0)

    def test_no_spurious_unit_periodicity(self):
        # Interior ladder frequencies are non-integer multiples of 2*pi, so
        # shifting t by 1 must change the embedding vector.
        a = time_embed(0.3, 8)
        b = time_embed(1.3, 8)
        assert np.max(np.abs(a - b)) > 1e-3

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            time_embed(0.5, 7)

    def test_vectorized_matches_scalar(self):
        ts = np.array([0.0, 0.25, 0.9])
        batch = embed_times(ts, 6)
        for row, t in zip(batch, ts):
            assert np.allclose(row, time_embed(float(t), 6))


class TestForward:
    def test_zero_initialized_output_is_exactly_zero(self):
        m = VectorFieldModel(dim=3, hidden=(16,), time_embed_dim=4, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((9, 3))
        assert np.all(m.velocity(x, 0.37) == 0.0)

    def test_identical_rows_give_identical_outputs(self):
        m = VectorFieldModel(
            dim=2, hidden=(8,), time_embed_dim=4, rng=np.random.default_rng(2), zero_init_output=False
        )
        x = np.array([[0.5, -1.0], [0.5, -1.0], [2.0, 0.1]])
        v = m.velocity(x, 0.5)
        assert np.array_equal(v[0], v[1])
        assert not np.array_equal(v[0], v[2])

    def test_permuting_rows_permutes_outputs(self):
        m = VectorFieldModel(
            dim=2, hidden=(8, 8), time_embed_dim=4, rng=np.random.default_rng(3), zero_init_output=False
        )
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 2))
        t = rng.uniform(0, 1, 6)
        perm = rng.permutation(6)
        v = m.velocity(x, t)
        vp = m.velocity(x[perm], t[perm])
        assert np.allclose(vp, v[perm], atol=1e-15)

    def test_hand_computed_single_hidden_layer(self):
        # dim=2, hidden=(2,), embed dim 2 (single frequency 2*pi), weights set
        # by hand; expected value computed with explicit scalar arithmetic.
        m = VectorFieldModel(dim=2, hidden=(2,), time_embed_dim=2, rng=np.random.default_rng(0))
        m.weights[0].data = np.array(
            [
                [1.0, 0.0],
                [0.0, 1.0],
                [0.5, -0.5],  # sin row
                [0.25, 0.75],  # cos row
            ]
        )
        m.biases[0].data = np.array([0.1, -0.2])
        m.weights[1].data = np.array([[2.0, 0.0], [1.0, -1.0]])
        m.biases[1].data = np.array([0.0, 0.3])

        x = np.array([[0.4, -0.6]])
        t = 0.25
        s, c = np.sin(2 * np.pi * t), np.cos(2 * np.pi * t)
        h1 = np.tanh(0.4 * 1.0 + (-0.6) * 0.0 + s * 0.5 + c * 0.25 + 0.1)
        h2 = np.tanh(0.4 * 0.0 + (-0.6) * 1.0 + s * -0.5 + c * 0.75 - 0.2)
        expected = np.array([h1 * 2.0 + h2 * 1.0 + 0.0, h1 * 0.0 + h2 * -1.0 + 0.3])
        got = m.velocity(x, t)[0]
        assert np.allclose(got, expected, atol=1e-14)

    def test_condition_width_enforced(self):
        m = VectorFieldModel(dim=2, hidden=(4,), time_embed_dim=4, cond_dim=3)
        x = np.zeros((2, 2))
        with pytest.raises(DimensionError):
            m.velocity(x, 0.5)  # missing condition
        with pytest.raises(DimensionError):
            m.velocity(x, 0.5, np.zeros((2, 4)))  # wrong width
        unc = VectorFieldModel(dim=2, hidden=(4,), time_embed_dim=4)
        with pytest.raises(DimensionError):
            unc.velocity(x, 0.5, np.zeros((2, 3)))  # unexpected condition

    def test_param_count_is_sum_of_tensor_sizes(self):
        m = VectorFieldModel(dim=3, hidden=(5, 7), time_embed_dim=6, cond_dim=2)
        expected = sum(p.data.size for _, p in m.parameters())
        assert m.param_count == expected
        in_w = 3 + 6 + 2
        by_hand = in_w * 5 + 5 + 5 * 7 + 7 + 7 * 3 + 3
        assert m.param_count == by_hand


ARCHS = [
    dict(dim=3, hidden=(6,), time_embed_dim=4, cond_dim=0),
    dict(dim=2, hidden=(6, 5), time_embed_dim=4, cond_dim=0),
    dict(dim=2, hidden=(5, 5, 4), time_embed_dim=6, cond_dim=0),
    dict(dim=3, hidden=(6,), time_embed_dim=4, cond_dim=2),
    dict(dim=2, hidden=(6, 5), time_embed_dim=4, cond_dim=3),
    dict(dim=2, hidden=(5, 5, 4), time_embed_dim=6, cond_dim=2),
]


class TestBackward:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_finite_difference_gradients(self, arch):
        rng = np.random.default_rng(10)
        model = VectorFieldModel(rng=rng, zero_init_output=False, **arch)
        n = 5
        x0 = rng.standard_normal((n, arch["dim"]))
        x1 = rng.standard_normal((n, arch["dim"]))
        t = rng.uniform(0, 1, n)
        xt = t[:, None] * x1 + (1 - t)[:, None] * x0
        c = rng.standard_normal((n, arch["cond_dim"])) if arch["cond_dim"] else None

        def loss():
            return _flow_loss_tensor(model.forward(xt, t, c), x0, x1)

        assert finite_difference_check(loss, model.parameters()) < 1e-5

    def test_zero_upstream_gives_zero_parameter_gradients(self):
        rng = np.random.default_rng(11)
        m = VectorFieldModel(dim=2, hidden=(4,), time_embed_dim=4, rng=rng, zero_init_output=False)
        m.zero_grad()
        out = m.forward(rng.standard_normal((3, 2)), rng.uniform(0, 1, 3))
        out.backward(np.zeros_like(out.data))
        for _, p in m.parameters():
            assert np.all(p.grad == 0.0)

    def test_doubling_upstream_doubles_gradients(self):
        rng = np.random.default_rng(12)
        m = VectorFieldModel(dim=2, hidden=(4,), time_embed_dim=4, rng=rng, zero_init_output=False)
        x = rng.standard_normal((3, 2))
        t = rng.uniform(0, 1, 3)
        g = rng.standard_normal((3, 2))

        m.zero_grad()
        m.forward(x, t).backward(g)
        single = {name: p.grad.copy() for name, p in m.parameters()}
        m.zero_grad()
        m.forward(x, t).backward(2.0 * g)
        for name, p in m.parameters():
            assert np.allclose(p.grad, 2.0 * single[name], atol=1e-14)


class TestAdam:
    def test_single_parameter_closed_form_first_step(self):
        # One step from zero moments with constant gradient g:
        # m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        g = 3.7
        p.grad = np.array([g])
        opt.step()
        expected = -0.01 * g / (abs(g) + 1e-8)
        assert np.allclose(p.data, expected, rtol=1e-12)

    def test_second_step_matches_scalar_recurrence(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        opt = Adam([("p", p)], lr=lr, beta1=b1, beta2=b2, eps=eps)
        theta, m, v = 1.0, 0.0, 0.0
        for step, g in enumerate([0.5, -1.25], start=1):
            p.grad = np.array([g])
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        assert np.allclose(p.data, theta, rtol=1e-12)

    def test_zero_gradient_zero_moments_is_noop(self):
        p = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_parameters_update_independently(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.1)
        p.grad = np.array([1.0, 0.0])
        opt.step()
        assert p.data[0] != 1.0
        assert p.data[1] == 1.0
