"""Zuweisungsmodell: multinomiale Logit-Fits fuer e(z;x) und g(s;z,x)."""

from __future__ import annotations

import logging

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import softmax

from .errors import ConvergenceError, DataError, SeparationError
from .models import AssignmentParams, DataSet, MultinomialOptions, Timer

logger = logging.getLogger(__name__)

MAX_HALVINGS = 40
STALL_GAIN = 1e-14


def design_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    return np.column_stack([np.ones(X.shape[0]), X])


def _loglik(B: np.ndarray, D: np.ndarray, labels: np.ndarray, ridge: float) -> float:
    lin = np.zeros((D.shape[0], B.shape[0] + 1))
    lin[:, 1:] = D @ B.T
    lin -= lin.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(lin).sum(axis=1))
    ll = float(np.sum(lin[np.arange(D.shape[0]), labels] - log_norm))
    return ll - 0.5 * ridge * float(np.sum(B * B))


def _probabilities(B: np.ndarray, D: np.ndarray) -> np.ndarray:
    lin = np.zeros((D.shape[0], B.shape[0] + 1))
    lin[:, 1:] = D @ B.T
    return softmax(lin, axis=1)


def _score_and_information(
    B: np.ndarray, D: np.ndarray, onehot: np.ndarray, ridge: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient (Kategorie-major) und beobachtete Information des freien Parametervektors."""
    P = _probabilities(B, D)[:, 1:]
    k, d = B.shape
    score = ((onehot[:, 1:] - P).T @ D - ridge * B).ravel()

    blocks = np.einsum("ij,ia,ib->jab", P, D, D)
    information = linalg.block_diag(*blocks) if k else np.zeros((0, 0))
    Q = (P[:, :, None] * D[:, None, :]).reshape(D.shape[0], k * d)
    information -= Q.T @ Q
    information += ridge * np.eye(k * d)
    return score, information


def fit_multinomial(
    labels: np.ndarray,
    X: np.ndarray,
    n_classes: int,
    opts: MultinomialOptions | None = None,
    class_names: list[str] | None = None,
    covariate_names: tuple[str, ...] = (),
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Newton-Raphson mit Schrittweitenhalbierung fuer ein multinomiales Logit.

    Kategorie 0 ist Referenz (Koeffizienten 0).

    Returns:
        (coef (K, p+1) inkl. Referenzzeile, vcov der freien Parameter, fit_meta)
    """
    opts = opts or MultinomialOptions()
    labels = np.asarray(labels, dtype=np.int64)
    D = design_matrix(X)
    n, d = D.shape
    class_names = class_names or [str(c) for c in range(n_classes)]
    coef_names = ["intercept", *(covariate_names or [f"x{j + 1}" for j in range(d - 1)])]

    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        empty = [class_names[c] for c in np.flatnonzero(counts == 0)]
        raise DataError(f"Kategorie ohne Beobachtungen: {empty}")

    if n_classes == 1:
        meta = {"loglik": 0.0, "iterations": 0, "converged": True, "history": [0.0]}
        return np.zeros((1, d)), np.zeros((0, 0)), meta

    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    B = np.zeros((n_classes - 1, d))
    B[:, 0] = np.log(counts[1:] / counts[0])

    ll = _loglik(B, D, labels, opts.ridge)
    history = [ll]
    converged = False
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        score, information = _score_and_information(B, D, onehot, opts.ridge)
        gmax = float(np.max(np.abs(score)))
        if gmax < opts.tol * n:
            converged = True
            iteration -= 1
            break
        try:
            step = linalg.solve(information, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(information, score)[0]
        step = step.reshape(B.shape)

        t = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = B + t * step
            ll_new = _loglik(candidate, D, labels, opts.ridge)
            if ll_new >= ll:
                break
            t *= 0.5
        else:
            candidate, ll_new = B, ll

        if ll_new - ll <= STALL_GAIN * max(1.0, abs(ll)):
            # Kein messbarer Anstieg mehr: Rundungsgrenze erreicht
            if gmax < opts.stall_tol * n:
                converged = True
                iteration -= 1
                break
            raise ConvergenceError(
                f"Multinomial-Fit stagniert in Iteration {iteration} "
                f"(max |Gradient| = {gmax:.3e}, n = {n})"
            )

        B, ll = candidate, ll_new
        history.append(ll)
        logger.debug(f"Multinomial Iteration {iteration}: loglik={ll:.10f}, step={t:g}")

        if np.max(np.abs(B)) > opts.separation_bound:
            row, col = np.unravel_index(np.argmax(np.abs(B)), B.shape)
            raise SeparationError(
                f"Vollstaendige Separation: |{coef_names[col]}| > {opts.separation_bound:g} "
                f"fuer Kategorie {class_names[row + 1]}",
                cell=class_names[row + 1],
                covariate=coef_names[col],
            )

    if not converged:
        raise ConvergenceError(
            f"Multinomial-Fit nicht konvergiert nach {opts.max_iter} Iterationen "
            f"(max |Gradient| = {gmax:.3e}, n = {n})"
        )

    _, information = _score_and_information(B, D, onehot, opts.ridge)
    vcov = linalg.pinvh(information)
    coef = np.vstack([np.zeros((1, d)), B])
    meta = {"loglik": ll, "iterations": iteration, "converged": True, "history": history}
    return coef, vcov, meta


def fit_joint_multinomial(d: DataSet, opts: MultinomialOptions | None = None) -> AssignmentParams:
    """Multinomiales Logit ueber alle q Zellen; Referenzzelle (1,1)."""
    h = d.hierarchy
    with Timer() as timer:
        coef, vcov, meta = fit_multinomial(
            d.cell, d.X, h.q, opts,
            class_names=[f"({z},{s})" for z, s in h.cells()],
            covariate_names=d.covariate_names,
        )
    logger.info(
        f"Zuweisungsmodell (joint, q={h.q}) in {timer.elapsed:.2f}s, "
        f"{meta['iterations']} Iterationen"
    )
    return AssignmentParams(
        hierarchy=h,
        structure="joint",
        coef=coef,
        vcov=vcov,
        covariate_names=d.covariate_names,
        fit_meta=meta,
    )


def _fit_surgeon_submodel(d: DataSet, z: int, opts: MultinomialOptions | None):
    rows = d.hospital == z
    h_z = d.hierarchy.surgeons_per_hospital[z - 1]
    return fit_multinomial(
        d.surgeon[rows] - 1, d.X[rows], h_z, opts,
        class_names=[f"({z},{s})" for s in range(1, h_z + 1)],
        covariate_names=d.covariate_names,
    )


def fit_nested_multinomial(
    d: DataSet,
    opts: MultinomialOptions | None = None,
    n_jobs: int = 1,
) -> AssignmentParams:
    """Erst Klinik-Multinomial fuer e(z;x), dann je Klinik ein Chirurgen-Multinomial."""
    h = d.hierarchy
    with Timer() as timer:
        hospital_coef, hospital_vcov, hospital_meta = fit_multinomial(
            d.hospital - 1, d.X, h.m, opts,
            class_names=[f"Klinik {z}" for z in range(1, h.m + 1)],
            covariate_names=d.covariate_names,
        )
        submodels = Parallel(n_jobs=n_jobs)(
            delayed(_fit_surgeon_submodel)(d, z, opts) for z in range(1, h.m + 1)
        )
    coef = np.vstack([hospital_coef, *(c for c, _, _ in submodels)])
    vcov = linalg.block_diag(hospital_vcov, *(v for _, v, _ in submodels))
    meta = {
        "loglik": hospital_meta["loglik"] + sum(m["loglik"] for _, _, m in submodels),
        "converged": True,
        "hospital": hospital_meta,
        "surgeon": [m for _, _, m in submodels],
    }
    logger.info(f"Zuweisungsmodell (nested, m={h.m}, q={h.q}) in {timer.elapsed:.2f}s")
    return AssignmentParams(
        hierarchy=h,
        structure="nested",
        coef=coef,
        vcov=vcov,
        covariate_names=d.covariate_names,
        fit_meta=meta,
    )


def _check_dimension(params: AssignmentParams, X: np.ndarray) -> np.ndarray:
    D = design_matrix(X)
    if D.shape[1] != params.p + 1:
        raise ValueError(f"Kovariatenvektor hat Laenge {D.shape[1] - 1}, erwartet {params.p}")
    return D


def cell_probabilities(params: AssignmentParams, X: np.ndarray) -> np.ndarray:
    """(n, q) Matrix P(Z=z, S=s | x; eta)."""
    D = _check_dimension(params, X)
    h = params.hierarchy
    if params.structure == "joint":
        return softmax(D @ params.coef.T, axis=1)

    e = softmax(D @ params.coef[: h.m].T, axis=1)
    P = np.empty((D.shape[0], h.q))
    for z in range(h.m):
        start, stop = h.cell_offsets[z], h.cell_offsets[z + 1]
        g = softmax(D @ params.coef[h.m + start : h.m + stop].T, axis=1)
        P[:, start:stop] = e[:, z : z + 1] * g
    return P


def hospital_surgeon_probabilities(
    params: AssignmentParams, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(e (n, m), g (n, q)) mit g(s;z,x) je Zelle."""
    D = _check_dimension(params, X)
    h = params.hierarchy
    if params.structure == "nested":
        e = softmax(D @ params.coef[: h.m].T, axis=1)
        g = np.empty((D.shape[0], h.q))
        for z in range(h.m):
            start, stop = h.cell_offsets[z], h.cell_offsets[z + 1]
            g[:, start:stop] = softmax(D @ params.coef[h.m + start : h.m + stop].T, axis=1)
        return e, g
    P = cell_probabilities(params, X)
    e = P @ h.hospital_indicator
    return e, P / e[:, h.cell_hospital]


def hospital_prob(params: AssignmentParams, x: np.ndarray) -> np.ndarray:
    """e(z;x,eta) fuer alle m Kliniken."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    e, _ = hospital_surgeon_probabilities(params, x)
    return e[0]


def surgeon_prob(params: AssignmentParams, z: int, x: np.ndarray) -> np.ndarray:
    """g(s;z,x,eta) fuer die h_z Chirurgen der Klinik z (1-basiert)."""
    h = params.hierarchy
    if not 1 <= z <= h.m:
        raise ValueError(f"Ungueltige Klinik z={z} (m={h.m})")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    _, g = hospital_surgeon_probabilities(params, x)
    return g[0, h.cell_offsets[z - 1] : h.cell_offsets[z]]
