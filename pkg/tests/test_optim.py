"""Adam update semantics."""

import numpy as np
import pytest

from varleak.layers import ParamSet
from varleak.optim import OptimizerError, adam_step


def _single_param(value):
    params = ParamSet()
    params.add("w", np.asarray(value, dtype=np.float64))
    return params


class TestAdamStep:
    def test_first_step_moves_by_learning_rate(self):
        params = _single_param([0.0])
        adam_step(params, {"w": np.array([1.0])}, lr=0.01)
        # bias correction makes the first step magnitude ~lr
        assert params["w"].data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_zero_gradient_leaves_parameters_but_advances_step(self):
        params = _single_param([1.5])
        adam_step(params, {"w": np.array([0.0])}, lr=0.1)
        assert params["w"].data[0] == 1.5
        assert params.state("w").t == 1

    def test_scalar_descent_reaches_minimum(self):
        # f(w) = w^2 from w=1 with lr 0.05
        params = _single_param([1.0])
        for _ in range(100):
            g = 2.0 * params["w"].data
            adam_step(params, {"w": g.copy()}, lr=0.05)
        assert abs(params["w"].data[0]) < 0.1

    def test_non_finite_gradient_aborts_without_mutation(self):
        params = ParamSet()
        params.add("a", np.array([1.0]))
        params.add("b", np.array([2.0]))
        grads = {"a": np.array([0.5]), "b": np.array([np.nan])}
        with pytest.raises(OptimizerError, match="'b'"):
            adam_step(params, grads, lr=0.1)
        assert params["a"].data[0] == 1.0
        assert params["b"].data[0] == 2.0
        assert params.state("a").t == 0

    def test_shape_mismatch_rejected(self):
        params = _single_param([1.0, 2.0])
        with pytest.raises(OptimizerError, match="shape"):
            adam_step(params, {"w": np.zeros((3,))}, lr=0.1)

    def test_missing_gradient_rejected(self):
        params = _single_param([1.0])
        with pytest.raises(OptimizerError, match="missing"):
            adam_step(params, {}, lr=0.1)

    def test_moments_track_gradient_statistics(self):
        params = _single_param([0.0])
        adam_step(params, {"w": np.array([2.0])}, lr=0.01)
        st = params.state("w")
        assert st.m[0] == pytest.approx(0.2)       # (1 - 0.9) * 2
        assert st.v[0] == pytest.approx(0.004)     # (1 - 0.999) * 4
        assert st.t == 1
