"""Forward/backward correctness of the autodiff primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evcap import numerics as nx
from evcap.errors import DimensionError, NumericError, ParameterError


def fd_check(fn, arrays, eps=1e-3, names=None):
    """Central-difference check of a scalar-valued fn over named arrays."""
    names = names or [f"p{i}" for i in range(len(arrays))]
    params = {n: np.asarray(a, dtype=np.float64) for n, a in zip(names, arrays)}

    def model(ts):
        return fn(*[ts[n] for n in names])

    return nx.grad_check(model, params, eps)


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(np.eye(2), np.array([[3.0], [4.0]]))
        assert np.allclose(out.data, [[3.0], [4.0]])

    def test_dot(self):
        out = nx.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))
        assert np.allclose(out.data, [[11.0]])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        err = fd_check(lambda x, y: nx.sum_all(nx.matmul(x, y)), [a, b], eps=1e-3)
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestPointwise:
    def test_sigmoid_zero(self):
        assert nx.pointwise("sigmoid", np.zeros((1, 1))).item() == pytest.approx(0.5)

    def test_tanh_zero(self):
        assert nx.pointwise("tanh", np.zeros((1, 1))).item() == pytest.approx(0.0)

    def test_mul_gradient(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        err = fd_check(lambda x, y: nx.sum_all(nx.pointwise("mul", x, y)), [a, b])
        assert err < 1e-4

    def test_scalar_broadcast(self):
        out = nx.add(np.ones((2, 2)), np.array([[3.0]]))
        assert np.allclose(out.data, 4.0)

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            nx.add(np.ones((2, 2)), np.ones((2, 3)))

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            nx.pointwise("div", np.ones((1, 1)), np.ones((1, 1)))

    def test_sigmoid_stable_at_extremes(self):
        out = nx.sigmoid(np.array([[-500.0, 500.0]]))
        assert np.all(np.isfinite(out.data))


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = nx.softmax_rows(np.full((1, 3), 2.7), temperature=0.4)
        assert np.allclose(out.data, 1.0 / 3.0, atol=1e-7)

    def test_hand_value(self):
        out = nx.softmax_rows(np.array([[1.0, 0.0, 0.0]]), temperature=0.1)
        e10 = np.exp(10.0)
        expected = np.array([e10, 1.0, 1.0]) / (e10 + 2.0)
        assert np.allclose(out.data[0], expected, rtol=1e-5)

    def test_saturation(self):
        out = nx.softmax_rows(np.array([[1.0, 0.0]]), temperature=0.001)
        assert out.data[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            nx.softmax_rows(np.ones((2, 2)), temperature=0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 5.0))
    def test_rows_sum_to_one(self, seed, temperature):
        z = np.random.default_rng(seed).normal(scale=3.0, size=(4, 6))
        out = nx.softmax_rows(z, temperature).data
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_gradient(self):
        z = np.random.default_rng(2).normal(size=(3, 4))
        err = fd_check(lambda x: nx.sum_all(nx.mul(nx.softmax_rows(x, 0.5), x)), [z])
        assert err < 1e-4


class TestOffdiagOps:
    def test_softmax_excludes_self(self):
        z = np.random.default_rng(3).normal(size=(5, 5))
        out = nx.offdiag_softmax_rows(z, 0.3).data
        assert np.allclose(np.diag(out), 0.0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_logsumexp_matches_reference(self):
        z = np.random.default_rng(4).normal(size=(4, 4))
        out = nx.offdiag_logsumexp_rows(z, 0.2).data[:, 0]
        for i in range(4):
            others = [z[i, j] / 0.2 for j in range(4) if j != i]
            assert out[i] == pytest.approx(np.log(np.sum(np.exp(others))), rel=1e-6)

    def test_gradients(self):
        z = np.random.default_rng(5).normal(size=(4, 4))
        w = np.random.default_rng(6).normal(size=(4, 4))
        err = fd_check(
            lambda x: nx.sum_all(nx.mul(nx.offdiag_softmax_rows(x, 0.4), w)), [z]
        )
        assert err < 1e-4
        err = fd_check(lambda x: nx.sum_all(nx.offdiag_logsumexp_rows(x, 0.4)), [z])
        assert err < 1e-4


class TestStructuralOps:
    def test_gather_scatter_roundtrip(self):
        z = np.arange(12.0).reshape(3, 4)
        rows, cols = np.array([0, 2, 1]), np.array([3, 0, 1])
        out = nx.gather_pairs(z, rows, cols)
        assert np.allclose(out.data[:, 0], [3.0, 8.0, 5.0])
        err = fd_check(lambda x: nx.sum_all(nx.mul(nx.gather_pairs(x, rows, cols), 2.0)), [z])
        assert err < 1e-6

    def test_normalize_rows(self):
        z = np.random.default_rng(7).normal(size=(4, 5))
        out = nx.l2_normalize_rows(z).data
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
        w = np.random.default_rng(8).normal(size=(4, 5))
        err = fd_check(lambda x: nx.sum_all(nx.mul(nx.l2_normalize_rows(x), w)), [z])
        assert err < 1e-4

    def test_normalize_floor(self):
        out = nx.l2_normalize_rows(np.zeros((2, 3)), floor=1e-8)
        assert np.allclose(out.data, 0.0)

    def test_concat_slice_reshape_transpose(self):
        a = np.arange(6.0).reshape(2, 3)
        b = np.arange(4.0).reshape(2, 2)
        cat = nx.concat_cols([a, b])
        assert cat.shape == (2, 5)
        assert np.allclose(nx.slice_cols(cat, 3, 5).data, b)
        assert np.allclose(nx.slice_rows(cat, 1, 2).data, cat.data[1:2])
        assert np.allclose(nx.transpose(a).data, a.T)
        assert nx.reshape(a, (3, 2)).shape == (3, 2)
        w = np.random.default_rng(9).normal(size=(2, 5))
        err = fd_check(
            lambda x, y: nx.sum_all(nx.mul(nx.concat_cols([x, y]), w)), [a, b]
        )
        assert err < 1e-6

    def test_reductions(self):
        z = np.arange(6.0).reshape(2, 3)
        assert nx.sum_all(z).item() == pytest.approx(15.0)
        assert nx.mean_all(z).item() == pytest.approx(2.5)
        err = fd_check(lambda x: nx.mean_all(nx.mul(x, x)), [z])
        assert err < 1e-6


class TestGradCheck:
    def test_linear_model(self):
        x = np.array([[1.5, -2.0]])

        def model(ts):
            return nx.sum_all(nx.matmul(ts["w"], nx.transpose(nx.Tensor(x))))

        err = nx.grad_check(model, {"w": np.array([[0.3, 0.7]])}, epsilon=1e-3)
        assert err < 1e-6

    def test_epsilon_bounds(self):
        with pytest.raises(ParameterError):
            nx.grad_check(lambda ts: nx.sum_all(ts["w"]), {"w": np.ones((1, 1))}, epsilon=1.0)

    def test_nonfinite_loss(self):
        def model(ts):
            return nx.exp(nx.mul(ts["w"], 1e6))

        with pytest.raises(NumericError):
            nx.grad_check(model, {"w": np.ones((1, 1))}, epsilon=1e-3)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(20))
    def test_primitive_gradients_random(self, seed):
        """Every differentiable primitive agrees with finite differences."""
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        m = rng.normal(size=(4, 4))
        w = rng.normal(size=(4, 2))
        cases = [
            (lambda x, y: nx.sum_all(nx.mul(nx.add(x, y), nx.sub(x, y))), [a, b]),
            (lambda x: nx.sum_all(nx.sigmoid(x)), [a]),
            (lambda x: nx.sum_all(nx.tanh(x)), [a]),
            (lambda x: nx.sum_all(nx.exp(nx.mul(x, 0.3))), [a]),
            (lambda x, y: nx.sum_all(nx.matmul(x, y)), [a, w]),
            (lambda x: nx.sum_all(nx.mul(nx.softmax_rows(x, 0.7), m)), [m]),
            (lambda x: nx.sum_all(nx.mul(nx.offdiag_softmax_rows(x, 0.7), m)), [m]),
            (lambda x: nx.sum_all(nx.offdiag_logsumexp_rows(x, 0.7)), [m]),
            (
                lambda x: nx.sum_all(nx.offdiag_nll_pairs(x, np.array([2, 3, 0, 1]), 0.7)),
                [m],
            ),
            (lambda x: nx.sum_all(nx.l2_normalize_rows(x)), [a]),
            (lambda x, y: nx.sum_all(nx.add_bias(x, y)), [a, rng.normal(size=(1, 4))]),
        ]
        for fn, arrays in cases:
            assert fd_check(fn, arrays, eps=1e-3) < 1e-4

    def test_determinism(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(16, 16)).astype(np.float32), rng.normal(size=(16, 16)).astype(np.float32)
        r1 = nx.matmul(a, b).data.tobytes()
        r2 = nx.matmul(a, b).data.tobytes()
        assert r1 == r2
        s1 = nx.softmax_rows(a, 0.1).data.tobytes()
        s2 = nx.softmax_rows(a, 0.1).data.tobytes()
        assert s1 == s2

    def test_float32_default(self):
        out = nx.matmul(np.ones((2, 2), dtype=np.float32), np.ones((2, 2), dtype=np.float32))
        assert out.dtype == np.float32

    def test_nonfinite_raises(self):
        with pytest.raises(NumericError):
            nx.exp(np.array([[1e9]], dtype=np.float32))
