"""Varianzzerlegung: modellbasiert (vierfach), semiparametrisch, dreifach, hypothetisch.

Alle Erwartungen ueber X laufen ueber die empirische Kovariatenverteilung des Datensatzes.
Innere Summen ueber Zellen werden je Patient exakt ausgewertet, in Chunks ueber Patienten.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .assignment import cell_probabilities
from .data import empirical_variance
from .errors import DataError
from .models import (
    AssignmentParams,
    DataSet,
    Hierarchy,
    MarginalModels,
    OutcomeParams,
    ResidualMode,
    TargetAssignment,
    VarianceComponents,
)
from .outcome import predict_cell_means, predict_records, variance_from_mean
from .utils import chunk_size_for, iter_chunks

logger = logging.getLogger(__name__)

PROBABILITY_TOL = 1e-12

BlockFn = Callable[[slice], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class RecordTerms:
    """Patientenweise Summanden der Komponenten (Form (n,))."""
    overall: np.ndarray
    between_hospital: np.ndarray
    between_surgeon: np.ndarray
    residual: np.ndarray
    hospital_residual: np.ndarray


def record_terms(mu: np.ndarray, P: np.ndarray, V: np.ndarray, hierarchy: Hierarchy) -> RecordTerms:
    """Innere Summen je Patient fuer Zellmittel mu, Zellwahrscheinlichkeiten P, Varianzen V.

    Abweichungen werden relativ zu einer Referenzzelle gebildet; identische Zellmittel
    liefern dadurch exakt 0.
    """
    indicator = hierarchy.hospital_indicator
    hz = hierarchy.cell_hospital
    e = P @ indicator
    # Kliniken mit e_z(x) = 0 tragen mit Gewicht 0 bei
    g = np.divide(P, e[:, hz], out=np.zeros_like(P), where=e[:, hz] > 0)

    within = mu - mu[:, hierarchy.cell_reference]
    within_mean = (g * within) @ indicator
    within_dev = within - within_mean[:, hz]
    between_surgeon = np.sum(P * within_dev**2, axis=1)

    across = mu - mu[:, :1]
    hospital_mean = (g * across) @ indicator
    overall = np.sum(e * hospital_mean, axis=1)
    between_hospital = np.sum(e * (hospital_mean - overall[:, None]) ** 2, axis=1)

    residual = np.sum(P * V, axis=1)
    # V(Y(z)|x) als Mischungsvarianz ueber die Chirurgen der Klinik
    mixture = (g * (V + within**2)) @ indicator - within_mean**2
    hospital_residual = np.sum(e * mixture, axis=1)

    return RecordTerms(
        overall=mu[:, 0] + overall,
        between_hospital=between_hospital,
        between_surgeon=between_surgeon,
        residual=residual,
        hospital_residual=hospital_residual,
    )


def _case_mix(overall: np.ndarray, weights: np.ndarray | None) -> float:
    centered = overall - overall[0]
    if weights is None:
        if centered.size < 2:
            return 0.0
        return float(np.var(centered, ddof=1))
    mean = float(weights @ centered)
    return float(weights @ (centered - mean) ** 2)


def accumulate_terms(
    n: int,
    block: BlockFn,
    hierarchy: Hierarchy,
    weights: np.ndarray | None = None,
    chunk_size: int | None = None,
) -> dict[str, float]:
    """Mittelt die Patientensummanden; ohne Gewichte mit 1/n (omega1: 1/(n-1))."""
    chunk = chunk_size or chunk_size_for(hierarchy.q)
    overall = np.empty(n)
    sums = {"omega2": 0.0, "omega3": 0.0, "omega4": 0.0, "hospital_residual": 0.0}
    for sl in iter_chunks(n, chunk):
        mu, P, V = block(sl)
        terms = record_terms(mu, P, V, hierarchy)
        overall[sl] = terms.overall
        w = weights[sl] if weights is not None else None
        for key, values in (
            ("omega2", terms.between_hospital),
            ("omega3", terms.between_surgeon),
            ("omega4", terms.residual),
            ("hospital_residual", terms.hospital_residual),
        ):
            sums[key] += float(w @ values) if w is not None else float(np.sum(values))
    if weights is None:
        sums = {key: value / n for key, value in sums.items()}
    sums["omega1"] = _case_mix(overall, weights)
    return sums


def _components(
    sums: dict[str, float],
    method: str,
    residual_mode: ResidualMode,
    total_variance: float | None,
    three_way: bool = False,
) -> VarianceComponents:
    omega1, omega2 = sums["omega1"], sums["omega2"]
    omega3 = 0.0 if three_way else sums["omega3"]
    flags: list[str] = ["omega3_absent"] if three_way else []
    if residual_mode == "by_subtraction":
        if total_variance is None:
            raise ValueError("Residuum per Subtraktion braucht die empirische Varianz")
        omega4 = total_variance - (omega1 + omega2 + omega3)
        total = total_variance
        if omega4 < 0:
            flags.append("negative_residual")
            logger.warning(f"Residualkomponente per Subtraktion negativ: {omega4:.4g}")
    else:
        omega4 = sums["hospital_residual"] if three_way else sums["omega4"]
        total = omega1 + omega2 + omega3 + omega4
    return VarianceComponents(
        omega1=omega1,
        omega2=omega2,
        omega3=omega3,
        omega4=omega4,
        total=total,
        method=method,
        residual_mode=residual_mode,
        flags=tuple(flags),
    )


def decompose_arrays(
    mu: np.ndarray,
    P: np.ndarray,
    V: np.ndarray,
    hierarchy: Hierarchy,
    weights: np.ndarray | None = None,
    method: str = "model_based",
) -> VarianceComponents:
    """Zerlegung aus fertigen (n, q)-Tabellen; mit weights als gewichtete Stuetzstellen.

    Wird fuer den Abgleich mit der Brute-Force-Auswertung diskreter Instanzen genutzt.
    """
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
    sums = accumulate_terms(
        mu.shape[0],
        lambda sl: (mu[sl], P[sl], V[sl]),
        hierarchy,
        weights=weights,
    )
    return _components(sums, method, "model_based", None)


def _check_inputs(d: DataSet, theta: OutcomeParams, eta: AssignmentParams | None = None):
    if theta.hierarchy != d.hierarchy or theta.p != d.p:
        raise DataError(
            f"Outcome-Parameter passen nicht zum Datensatz (Hierarchie {theta.hierarchy.surgeons_per_hospital} "
            f"vs. {d.hierarchy.surgeons_per_hospital}, p={theta.p} vs. {d.p})"
        )
    if eta is not None and (eta.hierarchy != d.hierarchy or eta.p != d.p):
        raise DataError("Zuweisungsparameter passen nicht zum Datensatz (Hierarchie oder p)")


def _model_block(d: DataSet, theta: OutcomeParams, probabilities: Callable[[np.ndarray], np.ndarray]) -> BlockFn:
    def block(sl: slice):
        X = d.X[sl]
        mu = predict_cell_means(theta, X)
        return mu, probabilities(X), variance_from_mean(theta, mu)
    return block


def decompose_model_based(
    d: DataSet,
    theta: OutcomeParams,
    eta: AssignmentParams,
    residual_mode: ResidualMode = "model_based",
) -> VarianceComponents:
    """Modellbasierte Vierfach-Zerlegung mit gefitteten mu, e, g."""
    _check_inputs(d, theta, eta)
    sums = accumulate_terms(d.n, _model_block(d, theta, lambda X: cell_probabilities(eta, X)), d.hierarchy)
    total = empirical_variance(d) if residual_mode == "by_subtraction" else None
    return _components(sums, "model_based", residual_mode, total)


def decompose_three_way(
    d: DataSet,
    theta: OutcomeParams,
    eta: AssignmentParams,
    residual_mode: ResidualMode = "by_subtraction",
) -> VarianceComponents:
    """Dreifach-Zerlegung (Fallmix, Klinik, Residuum); omega3 ist leer und markiert.

    Default ist das Residuum per Subtraktion von der empirischen Varianz. Mit
    residual_mode="model_based": E_X sum_z e(z;X) V(Y(z)|X) mit der Mischungsvarianz ueber
    die Chirurgen der Klinik.
    """
    _check_inputs(d, theta, eta)
    sums = accumulate_terms(d.n, _model_block(d, theta, lambda X: cell_probabilities(eta, X)), d.hierarchy)
    total = empirical_variance(d) if residual_mode == "by_subtraction" else None
    return _components(sums, "three_way", residual_mode, total, three_way=True)


def decompose_semiparametric(
    d: DataSet,
    mm: MarginalModels,
    residual_mode: ResidualMode = "by_subtraction",
) -> VarianceComponents:
    """Zerlegung ueber Vorhersagen der Marginalmodelle an den eigenen (s, z, x)."""
    for model in (mm.model_x, mm.model_zx, mm.model_szx):
        _check_inputs(d, model)
    pred_x = predict_records(mm.model_x, d)
    pred_zx = predict_records(mm.model_zx, d)
    pred_szx = predict_records(mm.model_szx, d)

    centered = pred_x - pred_x[0]
    sums = {
        "omega1": float(np.var(centered, ddof=1)) if d.n > 1 else 0.0,
        "omega2": float(np.mean((pred_zx - pred_x) ** 2)),
        "omega3": float(np.mean((pred_szx - pred_zx) ** 2)),
        "omega4": float(np.mean(variance_from_mean(mm.model_szx, pred_szx))),
    }
    total = empirical_variance(d) if residual_mode == "by_subtraction" else None
    return _components(sums, "semi_parametric", residual_mode, total)


def _validate_target(P: np.ndarray, hierarchy: Hierarchy) -> np.ndarray:
    if P.ndim != 2 or P.shape[1] != hierarchy.q:
        raise DataError(f"Ziel-Zuweisung hat Form {P.shape}, erwartet (n, {hierarchy.q})")
    if np.any(P <= 0):
        cells = hierarchy.cells()
        bad = sorted({cells[c] for c in np.flatnonzero(np.any(P <= 0, axis=0))})
        raise DataError(f"Zielwahrscheinlichkeit 0 fuer beobachtete Zellen: {bad[:10]}")
    deviation = np.max(np.abs(P.sum(axis=1) - 1.0))
    if deviation > PROBABILITY_TOL:
        raise DataError(f"Zielwahrscheinlichkeiten summieren nicht zu 1 (Abweichung {deviation:.2e})")
    return P


def decompose_hypothetical(
    d: DataSet,
    theta: OutcomeParams,
    target: TargetAssignment,
    residual_mode: ResidualMode = "model_based",
) -> VarianceComponents:
    """Vierfach-Zerlegung unter einem hypothetischen Zuweisungsmechanismus."""
    _check_inputs(d, theta)
    if target.hierarchy != d.hierarchy:
        raise DataError("Ziel-Zuweisung passt nicht zur Hierarchie des Datensatzes")

    def probabilities(X: np.ndarray) -> np.ndarray:
        return _validate_target(target.cell_probabilities(X), d.hierarchy)

    sums = accumulate_terms(d.n, _model_block(d, theta, probabilities), d.hierarchy)
    total = empirical_variance(d) if residual_mode == "by_subtraction" else None
    return _components(sums, "hypothetical", residual_mode, total)


def uniform_target(hierarchy: Hierarchy) -> TargetAssignment:
    """e~ = 1/m, g~ = 1/h_a."""
    row = 1.0 / (hierarchy.m * np.asarray(hierarchy.surgeons_per_hospital, dtype=float))
    row = row[hierarchy.cell_hospital]
    return TargetAssignment(
        kind="uniform",
        hierarchy=hierarchy,
        cell_probabilities=lambda X: np.tile(row, (np.atleast_2d(X).shape[0], 1)),
        description="Gleichverteilung ueber Kliniken und Chirurgen",
    )


def volume_preserving_target(d: DataSet) -> TargetAssignment:
    """e~(a) = P(Z=a), g~(b;a) = P(S=b|Z=a) aus den beobachteten Fallzahlen."""
    row = np.bincount(d.cell, minlength=d.hierarchy.q) / d.n
    return TargetAssignment(
        kind="volume_preserving",
        hierarchy=d.hierarchy,
        cell_probabilities=lambda X: np.tile(row, (np.atleast_2d(X).shape[0], 1)),
        description="Randomisierung mit beobachteten Fallzahlen",
    )


def observed_target(eta: AssignmentParams) -> TargetAssignment:
    return TargetAssignment(
        kind="observed",
        hierarchy=eta.hierarchy,
        cell_probabilities=lambda X: cell_probabilities(eta, X),
        description=f"Gefittete Zuweisung ({eta.structure})",
    )


def custom_target(
    hierarchy: Hierarchy,
    e_tilde: np.ndarray | Callable[[np.ndarray], np.ndarray],
    g_tilde: np.ndarray | Callable[[np.ndarray], np.ndarray],
) -> TargetAssignment:
    """Freie Ziel-Zuweisung aus e~ (m,) bzw. X -> (n, m) und g~ (q,) bzw. X -> (n, q)."""
    hz = hierarchy.cell_hospital

    def _rows(source, X: np.ndarray, width: int) -> np.ndarray:
        n = np.atleast_2d(X).shape[0]
        values = source(X) if callable(source) else np.tile(np.asarray(source, dtype=float), (n, 1))
        if values.shape != (n, width):
            raise DataError(f"Ziel-Tabelle hat Form {values.shape}, erwartet ({n}, {width})")
        return values

    def probabilities(X: np.ndarray) -> np.ndarray:
        e = _rows(e_tilde, X, hierarchy.m)
        g = _rows(g_tilde, X, hierarchy.q)
        if np.max(np.abs(e.sum(axis=1) - 1.0)) > PROBABILITY_TOL:
            raise DataError("e~ summiert nicht zu 1")
        if np.max(np.abs(g @ hierarchy.hospital_indicator - 1.0)) > PROBABILITY_TOL:
            raise DataError("g~ summiert innerhalb einer Klinik nicht zu 1")
        return e[:, hz] * g

    return TargetAssignment(kind="custom", hierarchy=hierarchy, cell_probabilities=probabilities)


def hypothetical_effect_terms(
    alpha: np.ndarray,
    gamma: np.ndarray,
    hierarchy: Hierarchy,
) -> tuple[float, float]:
    """Klinik- und Chirurgenterm unter Gleichverteilung bei Identity-Link.

    Klinikterm: (1/m) sum_a {(alpha_a - mean alpha) + (mean_b gamma_ab - mittleres Klinikmittel)}^2
    Chirurgenterm: (1/m) sum_a (1/h_a) sum_b (gamma_ab - mean_b gamma_ab)^2
    """
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    h = np.asarray(hierarchy.surgeons_per_hospital, dtype=float)
    gamma_bar = (gamma @ hierarchy.hospital_indicator) / h
    hospital_term = float(np.mean(((alpha - alpha.mean()) + (gamma_bar - gamma_bar.mean())) ** 2))
    spread = ((gamma - gamma_bar[hierarchy.cell_hospital]) ** 2) @ hierarchy.hospital_indicator
    surgeon_term = float(np.mean(spread / h))
    return hospital_term, surgeon_term


def icc_summary(theta: OutcomeParams) -> float:
    """(tau2 + kappa2) / (tau2 + kappa2 + sigma2), nur fuer Identity-Link."""
    if theta.link != "identity" or theta.sigma2 is None:
        raise ValueError(
            "ICC nur fuer Identity-Link definiert: beim Logit-Link ist sigma2 undefiniert, "
            "eine Konvention auf der latenten Skala (z.B. pi^2/3) wird nicht angenommen"
        )
    cluster = theta.tau2 + theta.kappa2
    return float(cluster / (cluster + theta.sigma2))
