"""Optimizer and schedule: frozen hand values, invariants, error paths."""

import numpy as np
import pytest

from icl_lab.optim import (
    AdamWState,
    NonFiniteGradError,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
)
from icl_lab.tensor import Tensor


def _params(**kv):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in kv.items()}


class TestAdamW:
    def test_first_step_closed_form(self):
        # w=1, g=0.1, lr=1e-3: bias correction makes m_hat/sqrt(v_hat) = g/|g|,
        # so w' = 1 - lr * 0.1 / (0.1 + eps) = 0.9990000001 exactly.
        params = _params(w=[1.0])
        state = AdamWState()
        adamw_step(state, params, {"w": np.array([0.1])}, lr=1e-3)
        np.testing.assert_allclose(params["w"].data, [0.9990000001], rtol=0, atol=1e-15)

    def test_update_magnitude_is_lr_independent_of_grad_scale(self):
        # sign-like behavior on the first step: |Δw| = lr/(1 + eps/|g|), so
        # within 1% of lr once |g| >= 1e-6
        for g in (1e-6, 1.0, 1e6):
            params = _params(w=[0.0])
            adamw_step(AdamWState(), params, {"w": np.array([g])}, lr=1e-3)
            np.testing.assert_allclose(-params["w"].data[0], 1e-3, rtol=0.011)

    def test_decoupled_decay_exact(self):
        # zero gradient: moments stay zero, only decay moves the weight
        params = _params(w=[1.0])
        adamw_step(AdamWState(), params, {"w": np.array([0.0])}, lr=1e-3, weight_decay=0.1)
        np.testing.assert_allclose(params["w"].data, [0.9999], rtol=0, atol=1e-15)

    def test_decay_not_in_moments(self):
        # with decoupled decay the moment buffers see only the raw gradient
        params = _params(w=[2.0])
        state = AdamWState()
        adamw_step(state, params, {"w": np.array([0.5])}, lr=1e-3, weight_decay=0.5)
        np.testing.assert_allclose(state.m["w"], [0.05], atol=1e-15)
        np.testing.assert_allclose(state.v["w"], [0.00025], atol=1e-15)

    def test_two_steps_match_reference_formula(self):
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal(4)
        g1, g2 = rng.standard_normal(4), rng.standard_normal(4)
        params = _params(w=w0.copy())
        state = AdamWState()
        adamw_step(state, params, {"w": g1.copy()}, lr=0.01)
        adamw_step(state, params, {"w": g2.copy()}, lr=0.01)

        m = 0.1 * g1
        v = 0.001 * g1**2
        w = w0 - 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        m = 0.9 * m + 0.1 * g2
        v = 0.999 * v + 0.001 * g2**2
        w = w - 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        np.testing.assert_allclose(params["w"].data, w, atol=1e-14)

    def test_missing_grads_skip_param_entirely(self):
        params = _params(a=[1.0], b=[1.0])
        state = AdamWState()
        adamw_step(state, params, {"a": np.array([0.0])}, lr=1e-3, weight_decay=0.5)
        assert params["b"].data[0] == 1.0  # no decay either
        assert "b" not in state.m

    def test_nonfinite_grad_raises_with_name(self):
        params = _params(bad=[1.0])
        with pytest.raises(NonFiniteGradError, match="bad"):
            adamw_step(AdamWState(), params, {"bad": np.array([np.nan])}, lr=1e-3)

    def test_shared_step_counter(self):
        state = AdamWState()
        params = _params(w=[0.0])
        for _ in range(3):
            adamw_step(state, params, {"w": np.array([1.0])}, lr=1e-3)
        assert state.step == 3


class TestClip:
    def test_noop_below_threshold(self):
        g = {"a": np.array([0.3, 0.4])}
        norm = clip_grad_norm(g, 1.0)
        np.testing.assert_allclose(norm, 0.5)
        np.testing.assert_allclose(g["a"], [0.3, 0.4])

    def test_scales_to_max_norm(self):
        g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        norm = clip_grad_norm(g, 1.0)
        np.testing.assert_allclose(norm, 5.0)
        total = np.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)
        np.testing.assert_allclose(g["a"], [0.6, 0.0])

    def test_zero_gradient_untouched(self):
        g = {"a": np.zeros(3)}
        assert clip_grad_norm(g, 1.0) == 0.0
        np.testing.assert_allclose(g["a"], np.zeros(3))


class TestCosineSchedule:
    def test_warmup_is_linear(self):
        for step in range(10):
            np.testing.assert_allclose(cosine_lr(step, 1.0, 10, 100), step / 10)

    def test_exact_base_at_warmup_end(self):
        assert cosine_lr(10, 0.3, 10, 100) == 0.3

    def test_exact_zero_at_total(self):
        assert cosine_lr(100, 0.3, 10, 100) == 0.0
        assert cosine_lr(250, 0.3, 10, 100) == 0.0

    def test_halfway_is_half(self):
        np.testing.assert_allclose(cosine_lr(55, 1.0, 10, 100), 0.5, atol=1e-12)

    def test_monotone_decay_after_warmup(self):
        vals = [cosine_lr(s, 1.0, 10, 100) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_returns_plain_float(self):
        assert type(cosine_lr(55, 1.0, 10, 100)) is float
