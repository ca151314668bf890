import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prosmin import numeric as nm
from prosmin.numeric import ContractError, DimensionError, GradientTape, NumericError, finite_difference


def _grad(fn, *arrays):
    leaves = [nm.tensor(a, requires_grad=True) for a in arrays]
    with GradientTape() as tape:
        loss = fn(*leaves)
    g = tape.backward(loss, leaves)
    return [g[t.id].data for t in leaves]


def _fd(fn, *arrays, h=1e-5):
    out = []
    for i in range(len(arrays)):
        def f(x, i=i):
            args = [nm.constant(a) for a in arrays]
            args[i] = nm.constant(x)
            return fn(*args).item()
        out.append(finite_difference(f, arrays[i], h))
    return out


def assert_grad_close(g, fd, rel=1e-4, abs_=1e-6):
    err = np.abs(g - fd)
    ok = (err <= abs_) | (err <= rel * np.abs(fd))
    assert ok.all(), f"max abs err {err.max():.3e}"


class TestRealTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            nm.tensor([1.0, np.nan])
        with pytest.raises(NumericError):
            nm.tensor([np.inf])

    def test_scalar_becomes_shape_one(self):
        assert nm.tensor(3.0).shape == (1,)

    def test_data_is_read_only(self):
        t = nm.tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0


class TestOpsExamples:
    def test_identity_matmul(self):
        out = nm.matmul(nm.tensor(np.eye(2)), nm.tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_row_norm_345(self):
        d = nm.sub(nm.tensor([0.0, 0.0]), nm.tensor([3.0, 4.0]))
        assert nm.row_norm(d).item() == 5.0

    def test_gelu_zero(self):
        assert nm.gelu(nm.tensor(0.0)).item() == 0.0

    def test_softplus_zero(self):
        assert nm.softplus(nm.tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(nm.tensor(np.ones((2, 3))), nm.tensor(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.add(nm.tensor(np.ones(3)), nm.tensor(np.ones(2)))

    def test_power_needs_positive_exponent(self):
        with pytest.raises(ContractError):
            nm.power(nm.tensor([1.0]), 0.0)

    def test_no_recording_without_tape(self):
        a = nm.tensor([1.0], requires_grad=True)
        assert not nm.mul(a, a).requires_grad

    def test_recording_on_tape(self):
        a = nm.tensor([1.0], requires_grad=True)
        with GradientTape() as tape:
            nm.mul(a, a)
        assert len(tape) == 1


class TestBackwardExamples:
    def test_linear_form(self):
        (gw,) = _grad(lambda w: nm.sum(nm.mul(w, nm.constant([3.0, 4.0]))), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(gw, [3.0, 4.0])

    def test_quadratic(self):
        (gw,) = _grad(lambda w: nm.sum(nm.mul(w, w)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(gw, [2.0, 4.0])

    def test_two_layer_network_matches_fd(self):
        rng = np.random.default_rng(0)
        x = nm.constant(rng.standard_normal((5, 3)))
        w1, b1 = rng.standard_normal((3, 4)), rng.standard_normal(4)
        w2 = rng.standard_normal((4, 2))

        def loss(w1, b1, w2):
            h = nm.gelu(nm.add(nm.matmul(x, w1), b1))
            return nm.mean(nm.softplus(nm.matmul(h, w2)))

        for g, fd in zip(_grad(loss, w1, b1, w2), _fd(loss, w1, b1, w2)):
            assert_grad_close(g, fd)

    def test_untouched_leaf_gets_zero(self):
        a = nm.tensor([1.0, 2.0], requires_grad=True)
        b = nm.tensor([5.0], requires_grad=True)
        with GradientTape() as tape:
            loss = nm.sum(nm.mul(a, a))
        g = tape.backward(loss, [a, b])
        np.testing.assert_array_equal(g[b.id].data, [0.0])

    def test_non_scalar_loss_rejected(self):
        a = nm.tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            out = nm.mul(a, a)
        with pytest.raises(ContractError):
            tape.backward(out)

    def test_detached_loss_rejected(self):
        with GradientTape() as tape:
            loss = nm.sum(nm.constant([1.0, 2.0]))
        with pytest.raises(ContractError):
            tape.backward(loss)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((6, 6))

        def run():
            leaf = nm.tensor(w, requires_grad=True)
            with GradientTape() as tape:
                h = nm.gelu(nm.matmul(leaf, leaf))
                loss = nm.mean(nm.power(nm.row_norm(h), 1.3))
            return tape.backward(loss, [leaf])[leaf.id].data

        assert run().tobytes() == run().tobytes()


class TestFiniteDifference:
    def test_quadratic(self):
        g = finite_difference(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-8)

    def test_abs_away_from_kink(self):
        g = finite_difference(lambda x: float(abs(x[0])), np.array([1.0]), 1e-5)
        assert g[0] == pytest.approx(1.0, abs=1e-10)


def _smooth_point(rng, shape):
    # keep clear of the kinks of abs/power so central differences are valid
    x = rng.uniform(0.3, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


UNARY_OPS = {
    "gelu": nm.gelu,
    "softplus": nm.softplus,
    "exp": nm.exp,
    "abs": nm.absolute,
    "power_0.7": lambda a: nm.power(a, 0.7),
    "power_1.5": lambda a: nm.power(a, 1.5),
    "row_norm": nm.row_norm,
    "log_softmax": nm.log_softmax,
    "scale": lambda a: nm.scale(a, -2.5),
    "sum_axis": lambda a: nm.sum(a, axis=1),
    "mean_axis": lambda a: nm.mean(a, axis=0),
    "reshape": lambda a: nm.reshape(a, (-1,)),
    "inv_sqrt_sq": lambda a: nm.inv_sqrt(nm.add(nm.mul(a, a), 0.5)),
    "take_rows": lambda a: nm.take_rows(a, [0, 2, 0]),
    "pick": lambda a: nm.pick(a, [1, 0, 3]),
}

BINARY_OPS = {
    "add_row": lambda a, b: nm.add(a, nm.take_rows(b, 0)),
    "sub_bcast": lambda a, b: nm.sub(a, nm.reshape(b, (3, 1, 4))),
    "mul": nm.mul,
    "matmul": lambda a, b: nm.matmul(a, nm.reshape(b, (4, 3))),
    "concat": lambda a, b: nm.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_ops_match_fd(name):
    op = UNARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    weights = rng.standard_normal(64)
    for _ in range(100):
        x = _smooth_point(rng, (3, 4))

        def loss(a):
            out = op(a)
            flat = nm.reshape(out, (-1,))
            return nm.sum(nm.mul(flat, weights[: flat.size]))

        assert_grad_close(_grad(loss, x)[0], _fd(loss, x)[0])


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
def test_binary_ops_match_fd(name):
    op = BINARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    weights = rng.standard_normal(256)
    for _ in range(100):
        a, b = _smooth_point(rng, (3, 4)), _smooth_point(rng, (3, 4))

        def loss(a, b):
            flat = nm.reshape(op(a, b), (-1,))
            return nm.sum(nm.mul(flat, weights[: flat.size]))

        for g, fd in zip(_grad(loss, a, b), _fd(loss, a, b)):
            assert_grad_close(g, fd)


def test_norm_power_kink_gives_zero_gradient():
    u = nm.tensor([[1.0, 2.0], [1.0, 2.0]], requires_grad=True)
    with GradientTape() as tape:
        d = nm.sub(nm.take_rows(u, [0]), nm.take_rows(u, [1]))
        loss = nm.sum(nm.power(nm.row_norm(d), 0.5))
    g = tape.backward(loss, [u])[u.id].data
    np.testing.assert_array_equal(g, 0.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_gradient_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3))

    def f(t):
        return nm.sum(nm.gelu(t))

    def g(t):
        return nm.sum(nm.mul(t, t))

    (ga,) = _grad(lambda t: nm.add(nm.scale(f(t), a), nm.scale(g(t), b)), x)
    (gf,) = _grad(f, x)
    (gg,) = _grad(g, x)
    np.testing.assert_allclose(ga, a * gf + b * gg, rtol=0, atol=1e-12)
