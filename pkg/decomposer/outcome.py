"""Outcome-Modell: Fit-Dispatch, Vorhersagen mu(z,s;x), Marginalmodelle."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit

from .errors import DataError
from .linear_mixed import fit_gaussian_nested
from .logistic_mixed import fit_laplace_nested
from .models import FULL_LEVELS, DataSet, Level, MarginalModels, MixedOptions, OutcomeParams

logger = logging.getLogger(__name__)


def fit_linear_mixed(
    d: DataSet,
    opts: MixedOptions | None = None,
    levels: tuple[Level, ...] = FULL_LEVELS,
) -> OutcomeParams:
    """Identity-Link: Y = alpha0 + alpha_z + gamma_zs + beta'x + eps."""
    if d.outcome_kind != "continuous":
        raise DataError("fit_linear_mixed braucht stetiges Outcome")
    return fit_gaussian_nested(d, opts, levels)


def fit_logistic_mixed(
    d: DataSet,
    opts: MixedOptions | None = None,
    levels: tuple[Level, ...] = FULL_LEVELS,
) -> OutcomeParams:
    """Logit-Link mit Laplace-approximierter marginaler Likelihood."""
    return fit_laplace_nested(d, opts, levels)


def fit_outcome_model(
    d: DataSet,
    opts: MixedOptions | None = None,
    levels: tuple[Level, ...] = FULL_LEVELS,
) -> OutcomeParams:
    if d.outcome_kind == "binary":
        return fit_logistic_mixed(d, opts, levels)
    return fit_linear_mixed(d, opts, levels)


def fit_marginal_models(
    d: DataSet,
    opts: MixedOptions | None = None,
    model_szx: OutcomeParams | None = None,
) -> MarginalModels:
    """E[Y|X] ohne Cluster, E[Y|Z,X] mit Klinik-Intercepts, E[Y|S,Z,X] verschachtelt.

    model_szx wird unveraendert uebernommen, falls bereits gefittet.
    """
    full = model_szx if model_szx is not None else fit_outcome_model(d, opts)
    return MarginalModels(
        model_x=fit_outcome_model(d, opts, levels=()),
        model_zx=fit_outcome_model(d, opts, levels=("hospital",)),
        model_szx=full,
    )


def _check_params(params: OutcomeParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != params.p:
        raise ValueError(f"Kovariatenvektor hat Laenge {X.shape[1]}, erwartet {params.p}")
    return X


def inverse_link(params: OutcomeParams, eta: np.ndarray) -> np.ndarray:
    return expit(eta) if params.link == "logit" else eta


def predict_cell_means(params: OutcomeParams, X: np.ndarray) -> np.ndarray:
    """(n, q) Matrix mu(z,s;x) fuer alle kontrafaktischen Zellen."""
    X = _check_params(params, X)
    eta = params.alpha0 + X @ params.beta
    return inverse_link(params, eta[:, None] + params.cell_effects()[None, :])


def predict_records(params: OutcomeParams, d: DataSet) -> np.ndarray:
    """mu an der eigenen Zelle jedes Patienten."""
    X = _check_params(params, d.X)
    if params.hierarchy != d.hierarchy:
        raise DataError("Hierarchie der Parameter passt nicht zum Datensatz")
    eta = params.alpha0 + X @ params.beta + params.cell_effects()[d.cell]
    return inverse_link(params, eta)


def predict_mu(params: OutcomeParams, z: int, s: int, x: np.ndarray) -> float:
    """g^-1(alpha0 + alpha_z + gamma_zs + beta'x) mit Empirical-Bayes-Effekten."""
    c = params.hierarchy.cell_index(z, s)
    X = _check_params(params, x)
    eta = params.alpha0 + float(X[0] @ params.beta) + float(params.cell_effects()[c])
    return float(inverse_link(params, np.array(eta)))


def variance_from_mean(params: OutcomeParams, mu: np.ndarray) -> np.ndarray:
    """V(Y | z, s, x): mu(1-mu) fuer Logit, sigma2 fuer Identity."""
    if params.link == "logit":
        return mu * (1.0 - mu)
    return np.full_like(mu, float(params.sigma2))


def conditional_variance(params: OutcomeParams, z: int, s: int, x: np.ndarray) -> float:
    mu = predict_mu(params, z, s, x)
    return float(variance_from_mean(params, np.array(mu)))
