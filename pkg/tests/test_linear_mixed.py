"""Tests fuer das lineare Modell mit verschachtelten Random Intercepts."""

from __future__ import annotations

import numpy as np
import pytest

from decomposer.data import dataset_from_arrays
from decomposer.errors import DataError
from decomposer.linear_mixed import LinearMixedLikelihood, SufficientStatistics, fit_gaussian_nested
from decomposer.models import MixedOptions

from .conftest import nested_dataset


def _numeric_gradient(lik: LinearMixedLikelihood, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (lik.evaluate(x + step, gradient=False)[0] - lik.evaluate(x - step, gradient=False)[0]) / (2 * h)
    return grad


def _anova_estimates(d, surgeons: int, per_cell: int) -> tuple[float, float, float]:
    """Momentenschaetzer des balancierten verschachtelten Designs."""
    m = d.hierarchy.m
    y = d.y.reshape(m, surgeons, per_cell)
    cell_means = y.mean(axis=2)
    hospital_means = cell_means.mean(axis=1)
    grand = y.mean()
    msa = surgeons * per_cell * np.sum((hospital_means - grand) ** 2) / (m - 1)
    msb = per_cell * np.sum((cell_means - hospital_means[:, None]) ** 2) / (m * (surgeons - 1))
    mse = np.sum((y - cell_means[:, :, None]) ** 2) / (m * surgeons * (per_cell - 1))
    return (msa - msb) / (surgeons * per_cell), (msb - mse) / per_cell, mse


def _dense_loglik(d, tau2: float, kappa2: float, sigma2: float) -> tuple[float, np.ndarray]:
    """ML-Log-Likelihood mit voller Kovarianzmatrix V und GLS-Koeffizienten."""
    h = d.hierarchy
    Za = (d.hospital[:, None] == np.arange(1, h.m + 1)).astype(float)
    Zs = (d.cell[:, None] == np.arange(h.q)).astype(float)
    V = tau2 * Za @ Za.T + kappa2 * Zs @ Zs.T + sigma2 * np.eye(d.n)
    D = np.column_stack([np.ones(d.n), d.X])
    V_inv = np.linalg.inv(V)
    coef = np.linalg.solve(D.T @ V_inv @ D, D.T @ V_inv @ d.y)
    resid = d.y - D @ coef
    _, logdet = np.linalg.slogdet(V)
    return float(-0.5 * (d.n * np.log(2.0 * np.pi) + logdet + resid @ V_inv @ resid)), coef


class TestLinearMixedLikelihood:
    @pytest.mark.parametrize("reml", [False, True])
    @pytest.mark.parametrize("levels", [("hospital", "surgeon"), ("hospital",), ()])
    def test_gradient_matches_finite_differences(self, continuous_data, levels, reml):
        lik = LinearMixedLikelihood(SufficientStatistics.from_dataset(continuous_data), levels, reml=reml)
        x = np.array([0.3, -0.4, 0.1][-len(lik.names):])
        _, grad, _ = lik.evaluate(x)
        np.testing.assert_allclose(grad, _numeric_gradient(lik, x), rtol=1e-4, atol=1e-6)

    def test_parameter_names_follow_levels(self, continuous_data):
        stats = SufficientStatistics.from_dataset(continuous_data)
        assert LinearMixedLikelihood(stats, ("hospital", "surgeon")).names == ["tau2", "kappa2", "sigma2"]
        assert LinearMixedLikelihood(stats, ("surgeon",)).names == ["kappa2", "sigma2"]

    def test_no_levels_is_ordinary_least_squares(self, continuous_data):
        lik = LinearMixedLikelihood(SufficientStatistics.from_dataset(continuous_data), ())
        _, _, beta = lik.evaluate(np.array([0.0]), gradient=False)
        D = np.column_stack([np.ones(continuous_data.n), continuous_data.X])
        expected = np.linalg.lstsq(D, continuous_data.y, rcond=None)[0]
        np.testing.assert_allclose(beta, expected, rtol=1e-10)


class TestFitGaussianNested:
    def test_reml_matches_anova_on_balanced_design(self):
        d = nested_dataset(seed=21, m=8, surgeons=4, per_cell=10, tau2=4.0, kappa2=2.0, beta=())
        tau2, kappa2, sigma2 = _anova_estimates(d, surgeons=4, per_cell=10)
        assert tau2 > 0 and kappa2 > 0
        fit = fit_gaussian_nested(d, MixedOptions(reml=True))
        assert fit.tau2 == pytest.approx(tau2, rel=1e-4)
        assert fit.kappa2 == pytest.approx(kappa2, rel=1e-4)
        assert fit.sigma2 == pytest.approx(sigma2, rel=1e-4)
        assert fit.alpha0 == pytest.approx(d.y.mean(), abs=1e-10)
        assert fit.fit_meta["criterion"] == "REML"

    def test_ml_shrinks_hospital_variance(self):
        d = nested_dataset(seed=21, m=8, surgeons=4, per_cell=10, tau2=4.0, kappa2=2.0, beta=())
        ml = fit_gaussian_nested(d, MixedOptions(reml=False))
        reml = fit_gaussian_nested(d, MixedOptions(reml=True))
        assert ml.tau2 < reml.tau2
        assert ml.fit_meta["criterion"] == "ML"

    def test_fit_matches_dense_likelihood_optimum(self, continuous_data):
        fit = fit_gaussian_nested(continuous_data)
        assert fit.link == "identity"
        ll, coef = _dense_loglik(continuous_data, fit.tau2, fit.kappa2, fit.sigma2)
        assert fit.fit_meta["loglik"] == pytest.approx(ll, rel=1e-10)
        np.testing.assert_allclose([fit.alpha0, *fit.beta], coef, atol=1e-8)
        for name in ("tau2", "kappa2", "sigma2"):
            for factor in (0.9, 1.1):
                moved = {"tau2": fit.tau2, "kappa2": fit.kappa2, "sigma2": fit.sigma2}
                moved[name] *= factor
                assert _dense_loglik(continuous_data, **moved)[0] <= ll + 1e-9, (name, factor)
        assert fit.alpha_z.shape == (4,)
        assert fit.gamma_zs.shape == (12,)
        history = np.array(fit.fit_meta["history"])
        assert np.all(np.diff(history) >= -1e-9)

    def test_hospital_effects_sum_to_zero_when_balanced(self, continuous_data):
        fit = fit_gaussian_nested(continuous_data)
        assert abs(fit.alpha_z.sum()) < 1e-8

    def test_boundary_variance_is_exact_zero(self):
        d = nested_dataset(seed=3, m=5, surgeons=3, per_cell=8, tau2=0.0, kappa2=1.0, beta=())
        y = d.y.reshape(5, -1)
        y = y - y.mean(axis=1, keepdims=True) + d.y.mean()
        d = d.with_outcome(y.ravel())
        fit = fit_gaussian_nested(d)
        assert fit.tau2 == 0.0
        np.testing.assert_array_equal(fit.alpha_z, np.zeros(5))
        assert fit.fit_meta["boundary"][0] == "tau2"
        assert fit.levels == ("surgeon",)
        assert fit.kappa2 > 0

    def test_variance_below_zero_floor_is_dropped(self, continuous_data):
        assert fit_gaussian_nested(continuous_data).tau2 > 0.0
        fit = fit_gaussian_nested(continuous_data, MixedOptions(boundary_check=5.0, boundary_zero=5.0))
        assert fit.tau2 == 0.0
        assert fit.kappa2 == 0.0
        assert fit.levels == ()
        assert sorted(fit.fit_meta["boundary"]) == ["kappa2", "tau2"]

    def test_reduced_levels(self, continuous_data):
        fit = fit_gaussian_nested(continuous_data, levels=("hospital",))
        assert fit.kappa2 == 0.0
        np.testing.assert_array_equal(fit.gamma_zs, np.zeros(12))

    def test_too_few_records(self):
        d = dataset_from_arrays([0.1, 0.4, 0.2], [1, 1, 2], [1, 2, 1], np.array([[1.0], [2.0], [0.5]]))
        with pytest.raises(DataError, match="Zu wenige"):
            fit_gaussian_nested(d)
