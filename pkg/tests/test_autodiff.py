import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarse2fine import autodiff as ad


def grad_of(fn, **arrays):
    with ad.Tape() as tape:
        leaves = {k: tape.leaf(v, k) for k, v in arrays.items()}
        out = fn(**leaves)
    return out, ad.backward(tape, out)


def fd_of(fn, **arrays):
    def loss(p):
        return fn(**p).item()
    return ad.finite_difference_gradient(loss, arrays, h=1e-6)


def assert_grad_close(g, fd):
    for k in g:
        diff = np.abs(g[k] - fd[k])
        scale = np.maximum(np.abs(g[k]), np.abs(fd[k]))
        ok = (diff <= 1e-4 * scale) | (diff <= 1e-7)
        assert np.all(ok), (k, g[k], fd[k])


class TestPrimitiveExamples:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu([-1.0, 2.0]).data, [0.0, 2.0])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_matmul(self):
        out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ad.add(np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_log_negative_is_error(self):
        with pytest.raises(ValueError, match="negative"):
            ad.log([1.0, -1e-300])

    def test_log_is_exact_above_zero_and_shifted_at_zero(self):
        out = ad.log([1e-13, 0.0, 2.0]).data
        assert out[0] == np.log(1e-13)
        assert out[1] == np.log(ad.LOG_EPS)
        assert out[2] == np.log(2.0)

    def test_non_finite_output_raises(self):
        with pytest.raises(FloatingPointError):
            ad.exp([1000.0])

    def test_unknown_primitive(self):
        with pytest.raises(KeyError):
            ad.apply_primitive("nope", 1.0)

    def test_tensors_are_read_only(self):
        t = ad.Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestStopGradient:
    def test_forward_passthrough(self):
        x = ad.Tensor(3.0)
        assert (ad.stop_gradient(x) * x).item() == 9.0

    def test_product_rule_with_constant_factor(self):
        _, g = grad_of(lambda x: ad.multiply(ad.stop_gradient(x), x), x=np.array(3.0))
        assert g["x"] == 3.0

    def test_alone_is_zero(self):
        _, g = grad_of(lambda x: ad.sum_(ad.stop_gradient(x)), x=np.array([1.0, 2.0]))
        np.testing.assert_array_equal(g["x"], [0.0, 0.0])

    def test_matches_graph_with_constant_substituted(self):
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 3))

        def f(x, u):
            return ad.sum_(ad.multiply(ad.exp(ad.scale(u, 0.1)), ad.matmul(x, w)))

        _, g_sg = grad_of(lambda x: f(x, ad.stop_gradient(ad.matmul(x, w))), x=x0)
        const = x0 @ w
        _, g_const = grad_of(lambda x: f(x, const), x=x0)
        np.testing.assert_array_equal(g_sg["x"], g_const["x"])


class TestStraightThrough:
    def test_forward_is_hard_bitwise(self):
        rng = np.random.default_rng(0)
        soft = ad.softmax(rng.normal(size=(5, 4)))
        hard = np.eye(4)[rng.integers(0, 4, size=5)]
        np.testing.assert_array_equal(ad.straight_through(hard, soft).data, hard)

    def test_gradient_matches_stop_gradient_composition(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        hard = np.eye(3)[rng.integers(0, 3, size=6)]
        w = rng.normal(size=(6, 3))

        def via_primitive(z):
            return ad.sum_(ad.multiply(ad.straight_through(hard, ad.softmax(z)), w))

        def via_composition(z):
            s = ad.softmax(z)
            return ad.sum_(ad.multiply(ad.add(ad.stop_gradient(ad.subtract(hard, s)), s), w))

        v1, g1 = grad_of(via_primitive, z=logits)
        v2, g2 = grad_of(via_composition, z=logits)
        np.testing.assert_allclose(v1.item(), v2.item(), rtol=1e-12)
        np.testing.assert_allclose(g1["z"], g2["z"], rtol=1e-12, atol=1e-15)


class TestBackward:
    def test_square(self):
        _, g = grad_of(lambda x: ad.multiply(x, x), x=np.array(3.0))
        assert g["x"] == 6.0

    def test_mean_relu_matmul_matches_fd(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(4, 3))
        fn = lambda w: ad.mean(ad.relu(ad.matmul(x, w)))  # noqa: E731
        _, g = grad_of(fn, w=w)
        assert_grad_close(g, fd_of(fn, w=w))

    def test_log_softmax_pick_at_uniform_logits(self):
        def fn(z):
            return ad.sum_(ad.multiply(ad.log(ad.softmax(z)), np.array([[0.0, 1.0, 0.0, 0.0]])))

        _, g = grad_of(fn, z=np.zeros((1, 4)))
        np.testing.assert_allclose(g["z"], np.array([[0, 1, 0, 0]]) - 0.25, atol=1e-15)

    def test_non_scalar_output(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.ones(3), "x")
            y = ad.scale(x, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(tape, y)

    def test_unreached_leaf_gets_zeros(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.ones(2), "x")
            tape.leaf(np.ones((2, 2)), "unused")
            y = ad.sum_(x)
        g = ad.backward(tape, y)
        np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))

    def test_constant_without_tape(self):
        out = ad.add(np.ones(2), np.ones(2))
        assert not out.tracked

    def test_finalized_tape_rejects_records(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.ones(2), "x")
        with tape:
            pass
        with pytest.raises(RuntimeError):
            tape.record("add", (x.node,), (), (2,))

    def test_determinism(self):
        rng = np.random.default_rng(5)
        w0 = rng.normal(size=(3, 3))
        x = rng.normal(size=(4, 3))
        fn = lambda w: ad.mean(ad.log(ad.softmax(ad.matmul(x, w))))  # noqa: E731
        _, g1 = grad_of(fn, w=w0)
        _, g2 = grad_of(fn, w=w0)
        assert g1["w"].tobytes() == g2["w"].tobytes()


class TestFiniteDifference:
    def test_linear(self):
        g = ad.finite_difference_gradient(lambda p: 3.0 * p["x"].sum(), {"x": np.array([0.7])}, h=1e-5)
        np.testing.assert_allclose(g["x"], [3.0], rtol=1e-9)

    def test_square(self):
        g = ad.finite_difference_gradient(lambda p: float(p["x"][0] ** 2), {"x": np.array([3.0])}, h=1e-4)
        assert abs(g["x"][0] - 6.0) <= 1e-7

    def test_nondeterministic_loss(self):
        rng = np.random.default_rng(0)
        with pytest.raises(RuntimeError, match="deterministic"):
            ad.finite_difference_gradient(lambda p: float(rng.normal()), {"x": np.zeros(1)})


# every primitive against central differences on 100 random instances
def _unary_cases(rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    return {
        "relu": (lambda a: ad.sum_(ad.multiply(ad.relu(a), w)), x + np.sign(x) * 0.05),
        "exp": (lambda a: ad.sum_(ad.multiply(ad.exp(a), w)), x),
        "log": (lambda a: ad.sum_(ad.multiply(ad.log(a), w)), np.abs(x) + 0.5),
        "scale": (lambda a: ad.sum_(ad.multiply(ad.scale(a, -1.7), w)), x),
        "sum_axis": (lambda a: ad.sum_(ad.multiply(ad.sum_(a, axis=1), w[:, :1])), x),
        "mean": (lambda a: ad.sum_(ad.multiply(ad.mean(a, axis=0), w[:1])), x),
        "mean_all": (lambda a: ad.mean(ad.multiply(a, w)), x),
        "softmax": (lambda a: ad.sum_(ad.multiply(ad.softmax(a), w)), x),
        "l2_normalize": (lambda a: ad.sum_(ad.multiply(ad.l2_normalize(a), w)), x),
    }


def _binary_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    bias = rng.normal(size=4)
    w = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))
    return {
        "add": (lambda x, y: ad.sum_(ad.multiply(ad.add(x, y), w)), a, bias),
        "subtract": (lambda x, y: ad.sum_(ad.multiply(ad.subtract(x, y), w)), a, b),
        "multiply": (lambda x, y: ad.sum_(ad.multiply(ad.multiply(x, y), w)), a, b),
        "divide": (lambda x, y: ad.sum_(ad.multiply(ad.divide(x, y), w)), a, np.abs(b) + 0.5),
        "matmul": (lambda x, y: ad.sum_(ad.multiply(ad.matmul(x, y), w[:, :2])), a, m),
        "concatenate": (lambda x, y: ad.sum_(ad.multiply(ad.concatenate([x, y], axis=1), np.hstack([w, w]))), a, b),
    }


@pytest.mark.parametrize("name", list(_unary_cases(np.random.default_rng(0))))
def test_unary_primitive_matches_finite_differences(name):
    for i in range(100):
        fn, x = _unary_cases(np.random.default_rng(i))[name]
        _, g = grad_of(fn, a=x)
        assert_grad_close(g, fd_of(fn, a=x))


@pytest.mark.parametrize("name", list(_binary_cases(np.random.default_rng(0))))
def test_binary_primitive_matches_finite_differences(name):
    for i in range(100):
        fn, x, y = _binary_cases(np.random.default_rng(i))[name]
        _, g = grad_of(fn, x=x, y=y)
        assert_grad_close(g, fd_of(fn, x=x, y=y))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_on_simplex(values):
    p = ad.softmax(np.array([values])).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9
