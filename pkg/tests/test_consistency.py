import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from egl_lab.errors import InputError
from egl_lab.losses.consistency import (
    REPORTED_WEIGHTS, counterexample_grid, optimal_wmse_prediction, run_counterexample,
)

positive = st.floats(0.01, 10.0)


@given(positive, positive, st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 1.0))
def test_tilted_mean_lies_between_outcomes(w1, w2, y1, y2, p):
    got = optimal_wmse_prediction([(y1, p), (y2, 1 - p)], [w1, w2])
    assert min(y1, y2) - 1e-9 <= got <= max(y1, y2) + 1e-9


@given(positive, st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 1.0))
def test_equal_weights_give_the_plain_mean(w, y1, y2, p):
    got = optimal_wmse_prediction([(y1, p), (y2, 1 - p)], [w, w])
    assert got == pytest.approx(p * y1 + (1 - p) * y2, abs=1e-9)


def test_invalid_inputs():
    with pytest.raises(InputError):
        optimal_wmse_prediction([(0.0, 0.5), (1.0, 0.6)], [1.0, 1.0])
    with pytest.raises(InputError):
        optimal_wmse_prediction([(0.0, 0.5), (1.0, 0.5)], [1.0, 0.0])
    with pytest.raises(InputError):
        counterexample_grid("spiral")
    with pytest.raises(InputError):
        run_counterexample(fit="newton")


def test_closed_form_weights_give_the_correct_decision():
    rep = run_counterexample()
    assert rep.optimal_individual == "B"
    assert rep.y_hat_a == pytest.approx(0.45, abs=1e-3)
    assert rep.is_consistent


def test_gradient_descent_agrees_with_closed_form():
    rep = run_counterexample(fit="gradient_descent")
    np.testing.assert_allclose(rep.gd_weights, rep.closed_form_weights, rtol=1e-3)


def test_reported_weights_flip_the_decision():
    rep = run_counterexample().reported
    assert rep["weights"] == REPORTED_WEIGHTS
    assert rep["chosen_individual"] == "A" and not rep["is_consistent"]


def test_uniform_grid_is_seeded():
    a = counterexample_grid("uniform", 25, seed=3)
    np.testing.assert_array_equal(a, counterexample_grid("uniform", 25, seed=3))
    assert a.size == 25 and np.abs(a).max() <= 1
