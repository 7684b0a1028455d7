import numpy as np
import pytest

from comet.diffcore import (
    Gradient,
    NonFiniteError,
    ParamSet,
    Tensor,
    evaluate,
    grad_check,
    gradient,
    value_and_gradient,
)


def sum_of_squares(pt, _inputs=None):
    return (pt["theta"] * pt["theta"]).sum()


def central_difference(loss_fn, params, inputs, h=1e-5):
    """Independent finite-difference oracle over every scalar parameter."""
    out = {}
    for name, base in params.entries.items():
        grads = np.zeros_like(base)
        flat = base.ravel()
        for idx in range(flat.size):
            bumped = flat.copy()
            bumped[idx] += h
            plus = evaluate(loss_fn, _with(params, name, bumped.reshape(base.shape)), inputs)
            bumped[idx] = flat[idx] - h
            minus = evaluate(loss_fn, _with(params, name, bumped.reshape(base.shape)), inputs)
            grads.ravel()[idx] = (plus - minus) / (2 * h)
        out[name] = grads
    return out


def _with(params, name, value):
    entries = dict(params.entries)
    entries[name] = value
    return ParamSet(entries)


class TestEvaluate:
    def test_sum_of_squares(self):
        params = ParamSet({"theta": np.array([1.0, 2.0])})
        assert evaluate(sum_of_squares, params) == 5.0

    def test_constant_zero(self):
        params = ParamSet({"theta": np.array([1.0])})
        assert evaluate(lambda pt, _: Tensor(0.0), params) == 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        params = ParamSet({"w": rng.normal(size=(3, 3)), "b": rng.normal(size=3)})
        x = rng.normal(size=(5, 3))

        def fn(pt, inputs):
            z = Tensor(inputs) @ pt["w"] + pt["b"]
            return (z * z).sum() * 0.5

        assert evaluate(fn, params, x) == evaluate(fn, params, x)

    def test_non_finite_carries_op_name(self):
        params = ParamSet({"theta": np.array([-1.0])})
        with pytest.raises(NonFiniteError) as excinfo:
            evaluate(lambda pt, _: pt["theta"].log(), params)
        assert excinfo.value.op == "log"

    def test_non_scalar_rejected(self):
        params = ParamSet({"theta": np.array([1.0, 2.0])})
        with pytest.raises(ValueError):
            evaluate(lambda pt, _: pt["theta"] * 2.0, params)


class TestGradient:
    def test_square(self):
        params = ParamSet({"theta": np.array([1.0])})
        grad = gradient(sum_of_squares, params)
        assert grad["theta"][0] == 2.0

    def test_constant_loss_gives_zero_gradient(self):
        params = ParamSet({"theta": np.array([3.0, -2.0])})
        grad = gradient(lambda pt, _: Tensor(7.0), params)
        assert np.array_equal(grad["theta"], np.zeros(2))

    def test_linear_map_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        params = ParamSet({"w": rng.normal(size=(4, 4))})
        u = rng.normal(size=(6, 4))

        def fn(pt, inputs):
            z = Tensor(inputs) @ pt["w"]
            return (z * z).sum() * 0.5

        analytic = gradient(fn, params, u)
        numeric = central_difference(fn, params, u)
        rel = np.abs(analytic["w"] - numeric["w"]) / np.maximum(1.0, np.abs(numeric["w"]))
        assert rel.max() < 1e-4

    def test_sum_linearity(self):
        rng = np.random.default_rng(2)
        params = ParamSet({"a": rng.normal(size=5), "b": rng.normal(size=5)})

        def f(pt, _):
            return (pt["a"] * pt["b"]).sum()

        def g(pt, _):
            return (pt["a"].tanh() * pt["a"]).sum() + pt["b"].exp().sum()

        def combined(pt, _):
            return f(pt, None) + g(pt, None)

        gf, gg, gc = gradient(f, params), gradient(g, params), gradient(combined, params)
        for name in params.names():
            np.testing.assert_allclose(gc[name], gf[name] + gg[name], rtol=1e-12, atol=1e-12)

    def test_random_compositions_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            params = ParamSet(
                {
                    "w0": rng.normal(0, 0.5, size=(3, 4)),
                    "b0": rng.normal(0, 0.2, size=4),
                    "w1": rng.normal(0, 0.5, size=(4, 1)),
                }
            )
            x = rng.normal(size=(5, 3))

            def fn(pt, inputs):
                h = (Tensor(inputs) @ pt["w0"] + pt["b0"]).tanh()
                out = h @ pt["w1"]
                return (out * out).sum() + (pt["b0"] * 0.1).exp().sum()

            report = grad_check(fn, params, x, h=1e-5, tol=1e-4)
            assert report.ok, report.max_err

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(4)
        params = ParamSet({"w": rng.normal(size=(3, 2))})
        x = rng.normal(size=(4, 3))

        def fn(pt, inputs):
            z = (Tensor(inputs) @ pt["w"]).relu()
            return z.sum()

        v1, g1 = value_and_gradient(fn, params, x)
        v2, g2 = value_and_gradient(fn, params, x)
        assert v1 == v2
        assert np.array_equal(g1["w"], g2["w"])

    def test_broadcast_bias_gradient(self):
        params = ParamSet({"b": np.array([1.0, -1.0])})
        x = np.ones((5, 2))

        def fn(pt, inputs):
            return (Tensor(inputs) + pt["b"]).sum()

        grad = gradient(fn, params, x)
        # bias reaches every row once
        assert np.array_equal(grad["b"], np.array([5.0, 5.0]))


class TestGradCheck:
    def test_quadratic_passes(self):
        params = ParamSet({"theta": np.array([0.3, -1.2, 2.0])})
        report = grad_check(sum_of_squares, params, h=1e-5, tol=1e-4)
        assert report.ok
        assert all(err < 1e-4 for err in report.max_err.values())

    def test_constant_loss_has_zero_error(self):
        params = ParamSet({"theta": np.array([1.0, 2.0])})
        report = grad_check(lambda pt, _: Tensor(5.0), params)
        assert report.max_err["theta"] == 0.0

    def test_relu_kink_is_flagged(self):
        # Evaluating relu exactly at the kink: analytic subgradient is 0,
        # central differences see slope 1/2.
        params = ParamSet({"theta": np.array([0.0])})
        report = grad_check(lambda pt, _: pt["theta"].relu().sum(), params)
        assert not report.ok
        assert "theta" in report.failures

    def test_requires_positive_h(self):
        params = ParamSet({"theta": np.array([1.0])})
        with pytest.raises(ValueError):
            grad_check(sum_of_squares, params, h=0.0)


class TestParamSet:
    def test_total_dim_and_sq_norm(self):
        params = ParamSet({"a": np.ones((2, 3)), "b": np.arange(4.0)})
        assert params.total_dim == 10
        assert params.sq_norm() == 6.0 + float(np.sum(np.arange(4.0) ** 2))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ParamSet({"a": np.array([1.0, np.nan])})

    def test_entries_read_only(self):
        params = ParamSet({"a": np.ones(3)})
        with pytest.raises(ValueError):
            params["a"][0] = 2.0

    def test_gradient_matches(self):
        params = ParamSet({"a": np.ones(3)})
        good = Gradient({"a": np.zeros(3)})
        bad = Gradient({"a": np.zeros(4)})
        assert good.matches(params)
        assert not bad.matches(params)

    def test_gradient_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            Gradient({"a": np.array([np.inf])})
