"""Lineares Modell mit verschachtelten Random Intercepts (Klinik, Chirurg), ML/REML.

Die Likelihood wird ueber Suffizienzstatistiken je Chirurg ausgewertet:
V = sigma2 I + kappa2 sum_s 1_s 1_s' + tau2 sum_z 1_z 1_z', invertiert per Woodbury.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DataError
from .models import FULL_LEVELS, DataSet, Hierarchy, Level, MixedOptions, OutcomeParams, Timer
from .optimize import LOG_VAR_BOUNDS, accepts_reduced, boundary_candidates, maximize_loglik
from .utils import group_indicator

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class SufficientStatistics:
    """Zellsummen von d = [1, x, y] und globales Kreuzprodukt."""
    n: int
    k: int
    cell_count: np.ndarray
    cell_sums: np.ndarray
    cross: np.ndarray
    cell_hospital: np.ndarray
    hospital_indicator: np.ndarray

    @classmethod
    def from_dataset(cls, d: DataSet) -> "SufficientStatistics":
        h = d.hierarchy
        D = np.column_stack([np.ones(d.n), d.X, d.y])
        sums = np.asarray(group_indicator(d.cell, h.q) @ D)
        return cls(
            n=d.n,
            k=d.p + 1,
            cell_count=np.bincount(d.cell, minlength=h.q).astype(float),
            cell_sums=sums,
            cross=D.T @ D,
            cell_hospital=h.cell_hospital,
            hospital_indicator=h.hospital_indicator,
        )


class LinearMixedLikelihood:
    """Profil-Log-Likelihood (beta herausprofiliert) ueber log-Varianzen.

    Parametervektor: [log tau2 (falls Klinik-Level), log kappa2 (falls Chirurgen-Level),
    log sigma2].
    """

    def __init__(self, stats: SufficientStatistics, levels: tuple[Level, ...], reml: bool = False):
        self.stats = stats
        self.levels = tuple(levels)
        self.reml = reml
        self.names = [*(("tau2",) if "hospital" in levels else ()),
                      *(("kappa2",) if "surgeon" in levels else ()), "sigma2"]

    def variances(self, log_params: np.ndarray) -> dict[str, float]:
        values = dict(zip(self.names, np.exp(np.asarray(log_params, dtype=float))))
        return {
            "tau2": float(values.get("tau2", 0.0)),
            "kappa2": float(values.get("kappa2", 0.0)),
            "sigma2": float(values["sigma2"]),
        }

    def _terms(self, tau2: float, kappa2: float, sigma2: float) -> dict:
        st = self.stats
        ns, S, hz = st.cell_count, st.cell_sums, st.cell_hospital
        den = sigma2 + ns * kappa2
        c = kappa2 / den
        w = ns / den
        t = st.hospital_indicator.T @ w
        u = st.hospital_indicator.T @ (S / den[:, None])
        f = 1.0 + tau2 * t
        M = (st.cross - (S * c[:, None]).T @ S) / sigma2 - (u * (tau2 / f)[:, None]).T @ u
        return {"den": den, "c": c, "w": w, "t": t, "u": u, "f": f, "M": M, "hz": hz}

    def evaluate(self, log_params: np.ndarray, gradient: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
        """(loglik, Gradient nach log-Varianzen, beta-Schaetzer inkl. Intercept)."""
        v = self.variances(log_params)
        tau2, kappa2, sigma2 = v["tau2"], v["kappa2"], v["sigma2"]
        st = self.stats
        k = st.k
        T = self._terms(tau2, kappa2, sigma2)
        den, c, w, t, u, f, M, hz = (T[key] for key in ("den", "c", "w", "t", "u", "f", "M", "hz"))

        A = M[:k, :k]
        r = M[:k, k]
        try:
            chol = linalg.cho_factor(A)
        except linalg.LinAlgError as exc:
            raise DataError("Design der festen Effekte ist singulaer") from exc
        A_inv = linalg.cho_solve(chol, np.eye(k))
        beta = A_inv @ r
        quad = float(M[k, k] - r @ beta)
        logdet_v = float(np.sum((st.cell_count - 1.0) * math.log(sigma2) + np.log(den)) + np.sum(np.log(f)))

        if self.reml:
            logdet_a = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
            ll = -0.5 * ((st.n - k) * LOG_2PI + logdet_v + logdet_a + quad)
        else:
            ll = -0.5 * (st.n * LOG_2PI + logdet_v + quad)

        if not gradient:
            return ll, np.zeros(len(self.names)), beta

        b = np.concatenate([-beta, [1.0]])
        S = st.cell_sums
        fz = f[hz]
        grads: dict[str, float] = {}

        def _component(trace: float, quad_form: float, G_xx: np.ndarray) -> float:
            correction = float(np.sum(A_inv * G_xx)) if self.reml else 0.0
            return -0.5 * (trace - correction - quad_form)

        if "tau2" in self.names:
            P = u / f[:, None]
            Pb = P @ b
            grads["tau2"] = _component(float(np.sum(t / f)), float(Pb @ Pb), P[:, :k].T @ P[:, :k])
        if "kappa2" in self.names:
            P = S / den[:, None] - (tau2 * w / fz)[:, None] * u[hz]
            Pb = P @ b
            grads["kappa2"] = _component(
                float(np.sum(w - tau2 * w**2 / fz)), float(Pb @ Pb), P[:, :k].T @ P[:, :k]
            )

        K = (c / sigma2)[:, None] * S + (tau2 / (den * fz))[:, None] * u[hz]
        ns = st.cell_count
        Sb, Kb = S @ b, K @ b
        quad_sigma = float(b @ st.cross @ b) / sigma2**2 - 2.0 * float(Sb @ Kb) / sigma2 + float(ns @ Kb**2)
        G_sigma = (
            st.cross[:k, :k] / sigma2**2
            - (S[:, :k].T @ K[:, :k] + K[:, :k].T @ S[:, :k]) / sigma2
            + (K[:, :k] * ns[:, None]).T @ K[:, :k]
        )
        trace_sigma = float(np.sum(ns * ((1.0 - c) / sigma2 - tau2 / (den**2 * fz))))
        grads["sigma2"] = _component(trace_sigma, quad_sigma, G_sigma)

        grad = np.array([v[name] * grads[name] for name in self.names])
        return ll, grad, beta

    def predict_effects(self, variances: dict[str, float], beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Empirical-Bayes-Vorhersagen E[alpha_z | y], E[gamma_zs | y]."""
        tau2, kappa2, sigma2 = variances["tau2"], variances["kappa2"], variances["sigma2"]
        T = self._terms(tau2, kappa2, sigma2)
        den, w, f, hz = T["den"], T["w"], T["f"], T["hz"]
        b = np.concatenate([-beta, [1.0]])
        R = self.stats.cell_sums @ b
        rho = self.stats.hospital_indicator.T @ (R / den)
        alpha = tau2 * rho / f
        gamma = kappa2 * (R / den - tau2 * w * rho[hz] / f[hz])
        return alpha, gamma


def _ols_residual_variance(stats: SufficientStatistics) -> float:
    k = stats.k
    A = stats.cross[:k, :k]
    r = stats.cross[:k, k]
    rss = float(stats.cross[k, k] - r @ linalg.solve(A, r, assume_a="pos"))
    return max(rss / max(1, stats.n - k), 1e-12)


def _fit_levels(
    stats: SufficientStatistics,
    hierarchy: Hierarchy,
    opts: MixedOptions,
    levels: tuple[Level, ...],
) -> OutcomeParams:
    lik = LinearMixedLikelihood(stats, levels, reml=opts.reml)
    s2 = _ols_residual_variance(stats)
    start = np.full(len(lik.names), math.log(s2 / len(lik.names)))

    result = maximize_loglik(
        lambda x: lik.evaluate(x)[:2],
        start,
        bounds=[LOG_VAR_BOUNDS] * len(lik.names),
        max_iter=opts.max_outer,
        gtol=opts.outer_tol,
        label=f"Lineares gemischtes Modell {levels or '(ohne Cluster)'}",
    )
    log_values = dict(zip(lik.names, result.x))
    random_logs = {name: value for name, value in log_values.items() if name != "sigma2"}
    level_of = {"tau2": "hospital", "kappa2": "surgeon"}
    for name in boundary_candidates(random_logs, opts.boundary_check):
        reduced_levels = tuple(lv for lv in levels if lv != level_of[name])
        reduced = _fit_levels(stats, hierarchy, opts, reduced_levels)
        if log_values[name] <= opts.boundary_zero or accepts_reduced(result.loglik, reduced.fit_meta["loglik"]):
            logger.warning(f"Varianz {name} am Rand: auf 0 gesetzt (log-Wert {log_values[name]:.2f})")
            reduced.fit_meta["boundary"] = [name, *reduced.fit_meta.get("boundary", [])]
            return reduced

    variances = lik.variances(result.x)
    _, _, beta = lik.evaluate(result.x, gradient=False)
    alpha, gamma = lik.predict_effects(variances, beta)
    return OutcomeParams(
        alpha0=float(beta[0]),
        beta=beta[1:].copy(),
        tau2=variances["tau2"],
        kappa2=variances["kappa2"],
        sigma2=variances["sigma2"],
        alpha_z=alpha if "hospital" in levels else np.zeros(hierarchy.m),
        gamma_zs=gamma if "surgeon" in levels else np.zeros(hierarchy.q),
        link="identity",
        hierarchy=hierarchy,
        levels=tuple(levels),
        fit_meta={
            "loglik": result.loglik,
            "converged": result.converged,
            "iterations": result.iterations,
            "criterion": "REML" if opts.reml else "ML",
            "history": result.history,
            "boundary": [],
        },
    )


def fit_gaussian_nested(
    d: DataSet,
    opts: MixedOptions | None = None,
    levels: tuple[Level, ...] = FULL_LEVELS,
) -> OutcomeParams:
    """ML/REML-Fit des linearen Modells mit den angegebenen Random-Intercept-Levels."""
    opts = opts or MixedOptions()
    if d.n <= d.p + 2:
        raise DataError(f"Zu wenige Beobachtungen fuer lineares Modell: n={d.n}, p={d.p}")
    stats = SufficientStatistics.from_dataset(d)
    with Timer() as timer:
        params = _fit_levels(stats, d.hierarchy, opts, tuple(levels))
    logger.info(
        f"Lineares Modell {tuple(levels)} in {timer.elapsed:.2f}s: tau2={params.tau2:.4g}, "
        f"kappa2={params.kappa2:.4g}, sigma2={params.sigma2:.4g}"
    )
    return params
