"""Tests fuer das logistische Modell mit Laplace-Approximation."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from decomposer.errors import DataError
from decomposer.logistic_mixed import LaplaceLikelihood, fit_laplace_nested
from decomposer.models import MixedOptions

from .conftest import nested_dataset


def _numeric_gradient(lik: LaplaceLikelihood, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (lik.evaluate(theta + step)[0] - lik.evaluate(theta - step)[0]) / (2 * h)
    return grad


class TestLaplaceLikelihood:
    @pytest.mark.parametrize(
        "levels, theta",
        [
            (("hospital", "surgeon"), [0.1, 0.4, -0.3, -0.8]),
            (("hospital",), [0.1, 0.4, -0.3]),
            (("surgeon",), [0.1, 0.4, -0.8]),
        ],
    )
    def test_gradient_matches_finite_differences(self, binary_data, levels, theta):
        lik = LaplaceLikelihood(binary_data, levels)
        theta = np.array(theta)
        _, grad = lik.evaluate(theta)
        np.testing.assert_allclose(grad, _numeric_gradient(lik, theta), rtol=1e-4, atol=1e-5)

    def test_no_levels_is_logistic_regression(self, binary_data):
        lik = LaplaceLikelihood(binary_data, ())
        theta = np.array([0.2, -0.3])
        ll, grad = lik.evaluate(theta)
        D = np.column_stack([np.ones(binary_data.n), binary_data.X])
        eta = D @ theta
        expected = np.sum(binary_data.y * eta - np.logaddexp(0.0, eta))
        assert ll == pytest.approx(expected, rel=1e-12)
        np.testing.assert_allclose(grad, D.T @ (binary_data.y - expit(eta)), rtol=1e-10)

    def test_mode_satisfies_score_equations(self, binary_data):
        lik = LaplaceLikelihood(binary_data, ("hospital", "surgeon"))
        beta = np.array([0.0, 0.5])
        a, g = lik.find_mode(beta, 0.8, 0.4)
        h = binary_data.hierarchy
        mu = expit(lik.D @ beta + a[lik.hospital_of] + g[lik.cell])
        R = np.bincount(binary_data.cell, weights=binary_data.y - mu, minlength=h.q)
        np.testing.assert_allclose(R - g / 0.4, 0.0, atol=1e-8)
        np.testing.assert_allclose(h.hospital_indicator.T @ R - a / 0.8, 0.0, atol=1e-8)


class TestFitLaplaceNested:
    def test_fit_recovers_slope(self, binary_data):
        fit = fit_laplace_nested(binary_data)
        assert fit.link == "logit"
        assert fit.sigma2 is None
        assert fit.beta[0] == pytest.approx(0.5, abs=0.3)
        assert fit.fit_meta["criterion"] == "Laplace-ML"
        assert fit.alpha_z.shape == (4,)
        assert fit.gamma_zs.shape == (12,)

    def test_flipping_the_outcome_mirrors_the_fit(self, binary_data):
        fit = fit_laplace_nested(binary_data)
        flipped = fit_laplace_nested(binary_data.with_outcome(1.0 - binary_data.y))
        np.testing.assert_allclose(flipped.beta, -fit.beta, atol=1e-4)
        assert flipped.alpha0 == pytest.approx(-fit.alpha0, abs=1e-4)
        assert flipped.tau2 == pytest.approx(fit.tau2, rel=1e-3, abs=1e-6)
        assert flipped.kappa2 == pytest.approx(fit.kappa2, rel=1e-3, abs=1e-6)

    def test_single_cluster_variances_vanish(self):
        d = nested_dataset(seed=4, m=1, surgeons=1, per_cell=200, tau2=0.0, kappa2=0.0, binary=True)
        fit = fit_laplace_nested(d)
        assert fit.tau2 + fit.kappa2 < 1e-3
        plain = fit_laplace_nested(d, levels=())
        assert fit.alpha0 == pytest.approx(plain.alpha0, abs=1e-3)
        np.testing.assert_allclose(fit.beta, plain.beta, atol=1e-3)

    def test_mode_found_for_vanishing_variances(self, binary_data):
        lik = LaplaceLikelihood(binary_data, ("hospital", "surgeon"))
        tiny = np.exp(-25.0)
        a, g = lik.find_mode(np.array([0.1, 0.4]), tiny, tiny)
        assert np.max(np.abs(a)) < 1e-6
        assert np.max(np.abs(g)) < 1e-6

    def test_mode_is_warm_started_without_drift(self, binary_data):
        lik = LaplaceLikelihood(binary_data, ("hospital", "surgeon"))
        beta = np.array([0.1, 0.4])
        first = lik.find_mode(beta, 0.8, 0.4)
        second = lik.find_mode(beta, 0.8, 0.4)
        np.testing.assert_allclose(second[0], first[0], atol=1e-9)
        np.testing.assert_allclose(second[1], first[1], atol=1e-9)

    def test_variance_below_zero_floor_is_dropped(self, binary_data):
        fit = fit_laplace_nested(binary_data, MixedOptions(boundary_check=5.0, boundary_zero=5.0))
        assert (fit.tau2, fit.kappa2) == (0.0, 0.0)
        assert fit.levels == ()
        assert sorted(fit.fit_meta["boundary"]) == ["kappa2", "tau2"]
        np.testing.assert_array_equal(fit.alpha_z, np.zeros(4))

    def test_constant_outcome_rejected(self, binary_data):
        with pytest.raises(DataError, match="konstant"):
            fit_laplace_nested(binary_data.with_outcome(np.ones(binary_data.n)))

    def test_continuous_outcome_rejected(self, continuous_data):
        with pytest.raises(DataError, match="binaeres"):
            fit_laplace_nested(continuous_data)
