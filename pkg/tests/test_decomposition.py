"""Tests fuer die Zerlegungsmethoden und Ziel-Zuweisungen."""

from __future__ import annotations

import numpy as np
import pytest

from decomposer.assignment import cell_probabilities
from decomposer.data import empirical_variance
from decomposer.decomposition import (
    accumulate_terms,
    custom_target,
    decompose_arrays,
    decompose_hypothetical,
    decompose_model_based,
    decompose_semiparametric,
    decompose_three_way,
    hypothetical_effect_terms,
    icc_summary,
    observed_target,
    uniform_target,
    volume_preserving_target,
)
from decomposer.errors import DataError
from decomposer.models import Hierarchy, TargetAssignment
from decomposer.outcome import fit_marginal_models, fit_outcome_model, predict_cell_means, variance_from_mean

from .conftest import make_eta, make_theta

ALPHA = [0.8, -0.3, 0.1, -0.6]
GAMMA = [0.5, -0.2, 0.0, 0.3, 0.3, -0.4, 0.0, 0.1, 0.2, -0.7, 0.4, 0.0]


@pytest.fixture
def eta(continuous_data):
    rng = np.random.default_rng(7)
    coef = np.vstack([np.zeros(2), rng.normal(0.0, 0.5, (11, 2))])
    return make_eta(continuous_data.hierarchy, coef)


@pytest.fixture
def theta(continuous_data):
    return make_theta(
        continuous_data.hierarchy, alpha=ALPHA, gamma=GAMMA, beta=(0.7,),
        link="identity", sigma2=1.0,
    )


class TestModelBased:
    def test_components_are_nonnegative_and_add_up(self, continuous_data, theta, eta):
        vc = decompose_model_based(continuous_data, theta, eta)
        assert np.all(vc.as_array() >= 0.0)
        assert vc.total == pytest.approx(vc.as_array().sum(), rel=1e-14)
        assert vc.omega4 == pytest.approx(1.0, rel=1e-12)
        assert vc.method == "model_based"
        assert vc.flags == ()

    def test_no_surgeon_effect_gives_exact_zero(self, continuous_data, theta, eta):
        vc = decompose_model_based(continuous_data, theta.with_effects(gamma_zs=np.zeros(12)), eta)
        assert vc.omega3 == 0.0

    def test_no_cluster_effects_give_exact_zeros(self, continuous_data, theta, eta):
        flat = theta.with_effects(alpha_z=np.zeros(4), gamma_zs=np.zeros(12))
        vc = decompose_model_based(continuous_data, flat, eta)
        assert vc.omega2 == 0.0
        assert vc.omega3 == 0.0
        assert vc.omega1 > 0.0

    def test_no_case_mix_gives_exact_zero(self, continuous_data, theta):
        coef = np.vstack([np.zeros(2), np.column_stack([np.linspace(-1, 1, 11), np.zeros(11)])])
        no_slope = make_theta(continuous_data.hierarchy, alpha=ALPHA, gamma=GAMMA, beta=(0.0,),
                              link="identity", sigma2=1.0)
        vc = decompose_model_based(continuous_data, no_slope, make_eta(continuous_data.hierarchy, coef))
        assert vc.omega1 == 0.0
        assert vc.omega2 > 0.0

    def test_residual_by_subtraction(self, continuous_data, theta, eta):
        vc = decompose_model_based(continuous_data, theta, eta, residual_mode="by_subtraction")
        assert vc.total == empirical_variance(continuous_data)
        assert vc.omega4 == pytest.approx(vc.total - vc.omega1 - vc.omega2 - vc.omega3, abs=1e-12)
        assert vc.residual_mode == "by_subtraction"

    def test_negative_residual_is_flagged(self, continuous_data, eta, caplog):
        loud = make_theta(continuous_data.hierarchy, alpha=[10.0, -10.0, 10.0, -10.0],
                          gamma=GAMMA, beta=(0.7,), link="identity", sigma2=1.0)
        with caplog.at_level("WARNING"):
            vc = decompose_model_based(continuous_data, loud, eta, residual_mode="by_subtraction")
        assert vc.omega4 < 0.0
        assert "negative_residual" in vc.flags
        assert "negativ" in caplog.text

    def test_mismatched_parameters(self, continuous_data, eta):
        other = make_theta(Hierarchy((2, 2)), beta=(0.1,), link="identity", sigma2=1.0)
        with pytest.raises(DataError):
            decompose_model_based(continuous_data, other, eta)

    def test_chunking_does_not_change_result(self, continuous_data, theta, eta):
        d = continuous_data

        def block(sl):
            mu = predict_cell_means(theta, d.X[sl])
            return mu, cell_probabilities(eta, d.X[sl]), variance_from_mean(theta, mu)

        whole = accumulate_terms(d.n, block, d.hierarchy)
        chunked = accumulate_terms(d.n, block, d.hierarchy, chunk_size=7)
        for key, value in whole.items():
            assert chunked[key] == pytest.approx(value, rel=1e-12, abs=1e-15)


class TestThreeWay:
    def test_residual_absorbs_surgeon_component(self, continuous_data, theta, eta):
        four = decompose_model_based(continuous_data, theta, eta)
        three = decompose_three_way(continuous_data, theta, eta, residual_mode="model_based")
        assert three.omega3 == 0.0
        assert "omega3_absent" in three.flags
        assert three.omega1 == four.omega1
        assert three.omega2 == four.omega2
        assert three.omega4 == pytest.approx(four.omega3 + four.omega4, rel=1e-12)

    def test_logit_link(self, binary_data):
        theta = make_theta(binary_data.hierarchy, alpha=ALPHA, gamma=GAMMA, beta=(0.5,))
        eta = make_eta(binary_data.hierarchy, np.zeros((12, 2)))
        four = decompose_model_based(binary_data, theta, eta)
        three = decompose_three_way(binary_data, theta, eta, residual_mode="model_based")
        assert three.omega4 == pytest.approx(four.omega3 + four.omega4, rel=1e-12)

    def test_residual_defaults_to_subtraction(self, continuous_data, theta, eta):
        four = decompose_model_based(continuous_data, theta, eta, residual_mode="by_subtraction")
        three = decompose_three_way(continuous_data, theta, eta)
        assert three.residual_mode == "by_subtraction"
        assert three.total == empirical_variance(continuous_data)
        assert three.omega4 == pytest.approx(four.omega3 + four.omega4, rel=1e-12)


class TestSemiParametric:
    def test_components_from_marginal_models(self, continuous_data):
        mm = fit_marginal_models(continuous_data)
        vc = decompose_semiparametric(continuous_data, mm)
        assert vc.method == "semi_parametric"
        assert vc.residual_mode == "by_subtraction"
        assert vc.total == empirical_variance(continuous_data)
        assert min(vc.omega1, vc.omega2, vc.omega3) >= 0.0

    def test_model_based_residual(self, continuous_data):
        mm = fit_marginal_models(continuous_data)
        vc = decompose_semiparametric(continuous_data, mm, residual_mode="model_based")
        assert vc.omega4 == pytest.approx(mm.model_szx.sigma2, rel=1e-12)
        assert vc.total == pytest.approx(vc.as_array().sum(), rel=1e-14)


class TestHypothetical:
    def test_uniform_target_matches_closed_form(self, continuous_data, theta):
        vc = decompose_hypothetical(continuous_data, theta, uniform_target(continuous_data.hierarchy))
        hospital_term, surgeon_term = hypothetical_effect_terms(ALPHA, GAMMA, continuous_data.hierarchy)
        assert vc.omega2 == pytest.approx(hospital_term, abs=1e-12)
        assert vc.omega3 == pytest.approx(surgeon_term, abs=1e-12)
        assert vc.omega1 == pytest.approx(0.49 * np.var(continuous_data.X[:, 0], ddof=1), rel=1e-10)

    def test_observed_target_reproduces_model_based(self, continuous_data, theta, eta):
        model = decompose_model_based(continuous_data, theta, eta)
        hypo = decompose_hypothetical(continuous_data, theta, observed_target(eta))
        np.testing.assert_array_equal(hypo.as_array(), model.as_array())
        assert hypo.method == "hypothetical"

    def test_volume_preserving_target_uses_cell_frequencies(self, continuous_data):
        target = volume_preserving_target(continuous_data)
        P = target.cell_probabilities(continuous_data.X[:3])
        np.testing.assert_allclose(P, np.full((3, 12), 1.0 / 12.0))

    def test_custom_target_equal_to_uniform(self, continuous_data, theta):
        h = continuous_data.hierarchy
        custom = custom_target(h, np.full(4, 0.25), np.full(12, 1.0 / 3.0))
        a = decompose_hypothetical(continuous_data, theta, custom)
        b = decompose_hypothetical(continuous_data, theta, uniform_target(h))
        np.testing.assert_allclose(a.as_array(), b.as_array(), rtol=1e-12, atol=1e-15)

    def test_custom_target_must_be_normalized(self, continuous_data, theta):
        h = continuous_data.hierarchy
        bad = custom_target(h, np.full(4, 0.3), np.full(12, 1.0 / 3.0))
        with pytest.raises(DataError, match="e~"):
            decompose_hypothetical(continuous_data, theta, bad)

    def test_zero_target_probability_rejected(self, continuous_data, theta):
        h = continuous_data.hierarchy
        row = np.full(12, 1.0 / 11.0)
        row[0] = 0.0
        target = TargetAssignment(
            kind="custom", hierarchy=h,
            cell_probabilities=lambda X: np.tile(row, (X.shape[0], 1)),
        )
        with pytest.raises(DataError, match="Zielwahrscheinlichkeit 0"):
            decompose_hypothetical(continuous_data, theta, target)


class TestDecomposeArrays:
    def test_weighted_support_points(self):
        h = Hierarchy((1, 1))
        mu = np.array([[0.0, 1.0], [1.0, 2.0]])
        P = np.array([[0.5, 0.5], [0.5, 0.5]])
        V = np.zeros((2, 2))
        vc = decompose_arrays(mu, P, V, h, weights=np.array([0.5, 0.5]))
        assert vc.omega1 == pytest.approx(0.25)
        assert vc.omega2 == pytest.approx(0.25)
        assert vc.omega3 == 0.0
        assert vc.omega4 == 0.0

    def test_unreachable_hospital_has_no_weight(self):
        h = Hierarchy((2, 1))
        mu = np.array([[0.1, 0.5, 0.3], [0.2, 0.6, 0.3]])
        P = np.array([[0.0, 0.0, 1.0], [0.25, 0.25, 0.5]])
        V = np.full((2, 3), 0.2)
        vc = decompose_arrays(mu, P, V, h, weights=np.array([0.5, 0.5]))
        np.testing.assert_allclose(vc.as_array(), [0.000625, 0.00125, 0.01, 0.2], rtol=0, atol=1e-14)


class TestIcc:
    def test_identity_link(self, continuous_data):
        fit = fit_outcome_model(continuous_data)
        expected = (fit.tau2 + fit.kappa2) / (fit.tau2 + fit.kappa2 + fit.sigma2)
        assert icc_summary(fit) == pytest.approx(expected)

    def test_logit_link_rejected(self):
        with pytest.raises(ValueError, match="Identity-Link"):
            icc_summary(make_theta(Hierarchy((1,))))
