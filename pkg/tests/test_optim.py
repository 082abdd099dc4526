"""Optimizers: single-step closed forms, an independent multi-step oracle,
lookahead interpolation, decay, state round trips, and a convex probe."""

import numpy as np
import pytest
from conftest import small_model_config

from expertfuse.config import OptimConfig
from expertfuse.exceptions import ConfigError, ShapeMismatch
from expertfuse.optim import Adam, Lookahead, RAdam, make_optimizer
from expertfuse.params import ModelParams, init_model_params
from expertfuse.tensor import gradients, matmul, sub, sum_all, hadamard, tensor


def toy_params(rng, shapes=None):
    shapes = shapes or {"a": (3, 2), "b": (4,)}
    params = ModelParams()
    for name, shape in shapes.items():
        params.add(name, rng.standard_normal(shape))
    return params


def grad_stream(rng, params, n):
    """Pre-drawn gradient maps, independent of the parameter values."""
    return [
        {name: rng.standard_normal(arr.shape) for name, arr in params.arrays().items()}
        for _ in range(n)
    ]


def radam_oracle(x0, grads, lr, beta1, beta2, eps, wd):
    """Independent scalar-loop transcription of the rectified update."""
    x = {k: v.copy() for k, v in x0.items()}
    m = {k: np.zeros_like(v) for k, v in x0.items()}
    v = {k: np.zeros_like(val) for k, val in x0.items()}
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    for t, g in enumerate(grads, start=1):
        for k in x:
            m[k] = beta1 * m[k] + (1 - beta1) * g[k]
            v[k] = beta2 * v[k] + (1 - beta2) * g[k] ** 2
            m_hat = m[k] / (1 - beta1**t)
            rho = rho_inf - 2 * t * beta2**t / (1 - beta2**t)
            if rho > 4.0:
                r = np.sqrt(
                    (rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho)
                )
                step = lr * r * m_hat / (np.sqrt(v[k] / (1 - beta2**t)) + eps)
            else:
                step = lr * m_hat
            x[k] = x[k] - lr * wd * x[k] - step
    return x


class TestSingleStepForms:
    def test_adam_first_step(self):
        """At t=1 bias correction makes m_hat = g and v_hat = g^2, so the
        update is lr * g / (|g| + eps)."""
        rng = np.random.default_rng(0)
        params = toy_params(rng)
        x0 = {k: v.copy() for k, v in params.arrays().items()}
        opt = Adam(params, lr=0.1, weight_decay=0.0)
        g = grad_stream(rng, params, 1)[0]
        opt.step(params, g)
        for k, arr in params.arrays().items():
            want = x0[k] - 0.1 * g[k] / (np.abs(g[k]) + opt.eps)
            np.testing.assert_allclose(arr, want, atol=1e-15)

    def test_radam_first_step_is_plain_momentum(self):
        """The second moment is untrusted at t=1 (rho = 1), so the update
        must be exactly lr * g with no denominator."""
        rng = np.random.default_rng(1)
        params = toy_params(rng)
        x0 = {k: v.copy() for k, v in params.arrays().items()}
        opt = RAdam(params, lr=0.05, weight_decay=0.0)
        g = grad_stream(rng, params, 1)[0]
        opt.step(params, g)
        for k, arr in params.arrays().items():
            np.testing.assert_allclose(arr, x0[k] - 0.05 * g[k], atol=1e-16)

    def test_zero_gradients_leave_only_decay(self):
        """With g = 0 both moments stay zero and each step multiplies the
        parameters by exactly (1 - lr * wd)."""
        rng = np.random.default_rng(2)
        for cls in (Adam, RAdam):
            params = toy_params(rng)
            x0 = {k: v.copy() for k, v in params.arrays().items()}
            opt = cls(params, lr=0.1, weight_decay=0.01)
            zeros = {k: np.zeros_like(v) for k, v in params.arrays().items()}
            for _ in range(3):
                opt.step(params, zeros)
            for k, arr in params.arrays().items():
                np.testing.assert_allclose(arr, x0[k] * (1 - 0.1 * 0.01) ** 3, atol=1e-15)


class TestMultiStepOracle:
    def test_radam_matches_independent_loop(self):
        """Ten steps straddle the rectification switch-on, so both branches
        are exercised against the oracle."""
        rng = np.random.default_rng(3)
        params = toy_params(rng)
        x0 = {k: v.copy() for k, v in params.arrays().items()}
        grads = grad_stream(rng, params, 10)
        opt = RAdam(params, lr=0.02, weight_decay=1e-4)
        for g in grads:
            opt.step(params, g)
        want = radam_oracle(x0, grads, 0.02, 0.9, 0.999, 1e-8, 1e-4)
        for k, arr in params.arrays().items():
            np.testing.assert_allclose(arr, want[k], atol=1e-14)

    def test_rectification_actually_switches(self):
        """For beta2 = 0.999 the rectified branch turns on within the first
        handful of steps; the trajectories with and without a denominator
        must separate."""
        rng = np.random.default_rng(4)
        params = toy_params(rng, {"x": (4,)})
        grads = grad_stream(rng, params, 6)
        opt = RAdam(params, lr=0.01, weight_decay=0.0)
        plain = {k: v.copy() for k, v in params.arrays().items()}
        m = np.zeros(4)
        for t, g in enumerate(grads, start=1):
            opt.step(params, g)
            m = 0.9 * m + 0.1 * g["x"]
            plain["x"] = plain["x"] - 0.01 * (m / (1 - 0.9**t))
        assert np.abs(params.arrays()["x"] - plain["x"]).max() > 1e-6


class TestLookahead:
    def test_interpolation_after_k_steps(self):
        """After k inner steps the wrapped parameters sit at
        slow + alpha * (fast - slow), where fast is the trajectory the
        inner optimizer alone would have produced."""
        rng = np.random.default_rng(5)
        params = toy_params(rng)
        shadow = ModelParams()
        for name, arr in params.arrays().items():
            shadow.add(name, arr.copy())
        slow0 = {k: v.copy() for k, v in params.arrays().items()}

        grads = grad_stream(rng, params, 4)
        wrapped = Lookahead(RAdam(params, lr=0.05), params, k=4, alpha=0.5)
        inner_only = RAdam(shadow, lr=0.05)
        for g in grads:
            wrapped.step(params, g)
            inner_only.step(shadow, g)
        fast = shadow.arrays()
        for k, arr in params.arrays().items():
            want = slow0[k] + 0.5 * (fast[k] - slow0[k])
            np.testing.assert_allclose(arr, want, atol=1e-15)

    def test_no_sync_before_k(self):
        rng = np.random.default_rng(6)
        params = toy_params(rng)
        shadow = ModelParams()
        for name, arr in params.arrays().items():
            shadow.add(name, arr.copy())
        grads = grad_stream(rng, params, 2)
        wrapped = Lookahead(RAdam(params, lr=0.05), params, k=3, alpha=0.5)
        inner_only = RAdam(shadow, lr=0.05)
        for g in grads:
            wrapped.step(params, g)
            inner_only.step(shadow, g)
        for k, arr in params.arrays().items():
            np.testing.assert_array_equal(arr, shadow.arrays()[k])

    def test_alpha_one_degenerates_to_inner(self):
        """alpha = 1 copies fast onto slow at every sync, so the wrapper
        must reproduce the bare inner trajectory bitwise."""
        rng = np.random.default_rng(13)
        params = toy_params(rng)
        shadow = ModelParams()
        for name, arr in params.arrays().items():
            shadow.add(name, arr.copy())
        grads = grad_stream(rng, params, 12)
        wrapped = Lookahead(RAdam(params, lr=0.05), params, k=3, alpha=1.0)
        inner_only = RAdam(shadow, lr=0.05)
        for g in grads:
            wrapped.step(params, g)
            inner_only.step(shadow, g)
        for k, arr in params.arrays().items():
            np.testing.assert_array_equal(arr, shadow.arrays()[k])

    def test_bad_hyperparameters_rejected(self):
        rng = np.random.default_rng(7)
        params = toy_params(rng)
        with pytest.raises(ConfigError):
            Lookahead(RAdam(params, lr=0.1), params, k=0)
        with pytest.raises(ConfigError):
            Lookahead(RAdam(params, lr=0.1), params, alpha=0.0)


class TestStateRoundTrip:
    @pytest.mark.parametrize("name", ["adam", "radam", "radam+lookahead"])
    def test_resume_is_bitwise(self, name):
        """Save after 7 steps, rebuild from scratch, load, and confirm 6
        more steps reproduce the uninterrupted run bit for bit (step 10
        crosses a lookahead sync)."""
        cfg = OptimConfig(optimizer=name, learning_rate=0.03)
        rng = np.random.default_rng(8)
        params = toy_params(rng)
        start = {k: v.copy() for k, v in params.arrays().items()}
        grads = grad_stream(rng, params, 13)

        opt = make_optimizer(cfg, params)
        for g in grads:
            opt.step(params, g)
        unbroken = {k: v.copy() for k, v in params.arrays().items()}

        params2 = ModelParams()
        for k, v in start.items():
            params2.add(k, v)
        opt2 = make_optimizer(cfg, params2)
        for g in grads[:7]:
            opt2.step(params2, g)
        meta, arrays = opt2.state()
        saved_params = {k: v.copy() for k, v in params2.arrays().items()}
        saved_arrays = {k: v.copy() for k, v in arrays.items()}

        params3 = ModelParams()
        for k, v in saved_params.items():
            params3.add(k, v)
        opt3 = make_optimizer(cfg, params3)
        opt3.load_state(meta, saved_arrays)
        for g in grads[7:]:
            opt3.step(params3, g)
        for k in unbroken:
            assert np.array_equal(params3.arrays()[k], unbroken[k]), k

    def test_kind_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        params = toy_params(rng)
        meta, arrays = Adam(params, lr=0.1).state()
        with pytest.raises(ConfigError, match="kind"):
            RAdam(params, lr=0.1).load_state(meta, arrays)


class TestDispatchAndValidation:
    def test_make_optimizer_kinds(self):
        rng = np.random.default_rng(10)
        params = toy_params(rng)
        assert isinstance(make_optimizer(OptimConfig(optimizer="adam"), params), Adam)
        assert isinstance(make_optimizer(OptimConfig(optimizer="radam"), params), RAdam)
        wrapped = make_optimizer(OptimConfig(optimizer="radam+lookahead"), params)
        assert isinstance(wrapped, Lookahead)
        assert isinstance(wrapped.inner, RAdam)
        assert wrapped.k == 5 and wrapped.alpha == 0.5

    def test_gradient_map_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        params = toy_params(rng)
        opt = Adam(params, lr=0.1)
        with pytest.raises(ShapeMismatch, match="b"):
            opt.step(params, {"a": np.zeros((3, 2))})


class TestScalarDynamics:
    def test_quadratic_shrinks_monotonically(self):
        """On f(x) = x^2 from x0 = 1 at lr = 0.01 the bare rectified step
        shrinks the iterate every step for 100 steps."""
        params = ModelParams()
        params.add("x", np.array([1.0]))
        opt = RAdam(params, lr=0.01, weight_decay=0.0)
        prev = 1.0
        for _ in range(100):
            x = params.arrays()["x"]
            opt.step(params, {"x": 2.0 * x})
            now = abs(float(params.arrays()["x"][0]))
            assert now < prev
            prev = now

    def test_quadratic_shrinks_across_lookahead_syncs(self):
        """The slow-weight pullback can raise |x| inside a cycle, but the
        value at each sync boundary still decreases cycle over cycle."""
        params = ModelParams()
        params.add("x", np.array([1.0]))
        opt = make_optimizer(
            OptimConfig(optimizer="radam+lookahead", learning_rate=0.01,
                        weight_decay=0.0),
            params,
        )
        prev = 1.0
        for cycle in range(20):
            for _ in range(opt.k):
                x = params.arrays()["x"]
                opt.step(params, {"x": 2.0 * x})
            now = abs(float(params.arrays()["x"][0]))
            assert now < prev, cycle
            prev = now

    def test_zero_learning_rate_is_a_null_update(self):
        rng = np.random.default_rng(14)
        params = toy_params(rng)
        x0 = {k: v.copy() for k, v in params.arrays().items()}
        opt = make_optimizer(
            OptimConfig(optimizer="radam+lookahead", learning_rate=0.0,
                        weight_decay=5e-5),
            params,
        )
        for g in grad_stream(rng, params, 11):
            opt.step(params, g)
        for k, arr in params.arrays().items():
            np.testing.assert_array_equal(arr, x0[k])


class TestConvexProbe:
    def test_least_squares_reaches_the_normal_equations(self):
        """Driving a tape-built quadratic with the default optimizer and a
        step-down schedule lands on the lstsq solution."""
        rng = np.random.default_rng(12)
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal(8)
        want = np.linalg.lstsq(a, b, rcond=None)[0]

        params = ModelParams()
        params.add("x", np.zeros((3, 1)))
        a_t = tensor(a)
        b_t = tensor(b.reshape(-1, 1))

        def loss_fn(p):
            r = sub(matmul(a_t, p["x"]), b_t)
            return sum_all(hadamard(r, r))

        cfg = OptimConfig(optimizer="radam+lookahead", learning_rate=0.1,
                          weight_decay=0.0)
        opt = make_optimizer(cfg, params)
        # levels must be long relative to the second moment's half-life
        # (~700 steps at beta2 = 0.999) or the denominator goes stale
        for lr in [0.1, 0.01]:
            opt.lr = lr
            for _ in range(1500):
                grads = gradients(loss_fn, params)
                opt.step(params, grads)
        got = params.arrays()["x"].ravel()
        assert np.abs(got - want).max() < 1e-9
