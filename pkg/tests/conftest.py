"""Gemeinsame Fixtures: kleine verschachtelte Datensaetze und handgebaute Parameter."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from decomposer.data import dataset_from_arrays
from decomposer.models import AssignmentParams, DataSet, Hierarchy, OutcomeParams


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Akzeptanztests ausfuehren")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="braucht --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def nested_dataset(
    seed: int,
    m: int,
    surgeons: int,
    per_cell: int,
    tau2: float,
    kappa2: float,
    sigma2: float = 1.0,
    beta: tuple[float, ...] = (0.5,),
    binary: bool = False,
    intercept: float = 0.0,
) -> DataSet:
    """Balancierter Datensatz mit per_cell Patienten je Chirurg."""
    rng = np.random.default_rng(seed)
    q = m * surgeons
    n = q * per_cell
    cell = np.repeat(np.arange(q), per_cell)
    hospital = cell // surgeons
    alpha = rng.normal(0.0, np.sqrt(tau2), m)
    gamma = rng.normal(0.0, np.sqrt(kappa2), q)
    X = rng.standard_normal((n, len(beta)))
    eta = intercept + X @ np.asarray(beta, dtype=float) + alpha[hospital] + gamma[cell]
    if binary:
        y = (rng.random(n) < expit(eta)).astype(float)
    else:
        y = eta + rng.normal(0.0, np.sqrt(sigma2), n)
    return dataset_from_arrays(
        y=y,
        hospital_labels=hospital + 1,
        surgeon_labels=cell % surgeons + 1,
        X=X,
        outcome_kind="binary" if binary else "continuous",
    )


def make_theta(
    hierarchy: Hierarchy,
    alpha: np.ndarray | None = None,
    gamma: np.ndarray | None = None,
    beta: tuple[float, ...] = (),
    alpha0: float = 0.0,
    link: str = "logit",
    sigma2: float | None = None,
) -> OutcomeParams:
    return OutcomeParams(
        alpha0=alpha0,
        beta=np.asarray(beta, dtype=float),
        tau2=1.0,
        kappa2=1.0,
        sigma2=sigma2 if link == "identity" else None,
        alpha_z=np.zeros(hierarchy.m) if alpha is None else np.asarray(alpha, dtype=float),
        gamma_zs=np.zeros(hierarchy.q) if gamma is None else np.asarray(gamma, dtype=float),
        link=link,
        hierarchy=hierarchy,
    )


def make_eta(hierarchy: Hierarchy, coef: np.ndarray) -> AssignmentParams:
    """Gemeinsames Zuweisungsmodell; Zeile 0 von coef muss die Referenz (Nullen) sein."""
    coef = np.asarray(coef, dtype=float)
    k = (hierarchy.q - 1) * coef.shape[1]
    return AssignmentParams(hierarchy=hierarchy, structure="joint", coef=coef, vcov=np.zeros((k, k)))


@pytest.fixture
def continuous_data() -> DataSet:
    return nested_dataset(seed=11, m=4, surgeons=3, per_cell=25, tau2=1.0, kappa2=0.5)


@pytest.fixture
def binary_data() -> DataSet:
    return nested_dataset(seed=12, m=4, surgeons=3, per_cell=40, tau2=0.8, kappa2=0.4, binary=True)
