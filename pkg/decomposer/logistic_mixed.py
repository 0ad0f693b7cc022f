"""Logistisches Modell mit verschachtelten Random Intercepts per Laplace-Approximation.

Die negative Hesse-Matrix der Random Effects hat Pfeilstruktur je Klinik
(Klinik-Intercept gekoppelt an die eigenen Chirurgen); Inverse und Determinante
werden ueber das Schur-Komplement je Klinik berechnet.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, DataError
from .models import FULL_LEVELS, DataSet, Level, MixedOptions, OutcomeParams, Timer
from .optimize import LOG_VAR_BOUNDS, accepts_reduced, boundary_candidates, maximize_loglik
from .utils import group_indicator

logger = logging.getLogger(__name__)

MAX_HALVINGS = 40
MODE_STALL_DECREMENT = 1e-6
STALL_GAIN = 1e-14


class LaplaceLikelihood:
    """Laplace-approximierte marginale Log-Likelihood mit exaktem Gradienten.

    Parametervektor: [beta (Intercept + p Steigungen), log tau2 (falls Klinik-Level),
    log kappa2 (falls Chirurgen-Level)]. Der Modus der Random Effects wird zwischen
    Auswertungen als Warmstart gehalten.
    """

    def __init__(self, d: DataSet, levels: tuple[Level, ...], opts: MixedOptions | None = None):
        self.opts = opts or MixedOptions()
        self.levels = tuple(levels)
        self.has_hospital = "hospital" in levels
        self.has_surgeon = "surgeon" in levels
        h = d.hierarchy
        self.m, self.q = h.m, h.q
        self.y = d.y
        self.D = np.column_stack([np.ones(d.n), d.X])
        self.k = self.D.shape[1]
        self.cell = d.cell
        self.cell_hospital = h.cell_hospital
        self.hospital_of = h.cell_hospital[d.cell]
        self.indicator = group_indicator(d.cell, h.q)
        self.H = h.hospital_indicator
        self.a = np.zeros(self.m)
        self.g = np.zeros(self.q)

    @property
    def n_params(self) -> int:
        return self.k + int(self.has_hospital) + int(self.has_surgeon)

    def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, float, float]:
        theta = np.asarray(theta, dtype=float)
        beta = theta[: self.k]
        pos = self.k
        tau2 = kappa2 = 0.0
        if self.has_hospital:
            tau2 = math.exp(theta[pos])
            pos += 1
        if self.has_surgeon:
            kappa2 = math.exp(theta[pos])
        return beta, tau2, kappa2

    def _cell_sum(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.indicator @ values)

    def _joint(self, eta: np.ndarray, a: np.ndarray, g: np.ndarray, tau2: float, kappa2: float) -> float:
        value = float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))
        if self.has_hospital:
            value -= float(a @ a) / (2.0 * tau2)
        if self.has_surgeon:
            value -= float(g @ g) / (2.0 * kappa2)
        return value

    def _linear_predictor(self, eta0: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
        return eta0 + a[self.hospital_of] + g[self.cell]

    def _arrow(self, W: np.ndarray, tau2: float, kappa2: float) -> dict:
        """Inverse-Eintraege, log-Determinante und Hebel der negativen Hesse-Matrix."""
        hz = self.cell_hospital
        out = {"haa": np.zeros(self.m), "has": np.zeros(self.q), "hss": np.zeros(self.q)}
        if self.has_hospital and self.has_surgeon:
            d = W + 1.0 / kappa2
            schur = self.H.T @ W + 1.0 / tau2 - self.H.T @ (W**2 / d)
            out["d"], out["schur"] = d, schur
            out["haa"] = 1.0 / schur
            out["has"] = -W / (d * schur[hz])
            out["hss"] = 1.0 / d + W**2 / (d**2 * schur[hz])
            out["logdet"] = float(np.sum(np.log(d)) + np.sum(np.log(schur)))
        elif self.has_hospital:
            schur = self.H.T @ W + 1.0 / tau2
            out["schur"] = schur
            out["haa"] = 1.0 / schur
            out["logdet"] = float(np.sum(np.log(schur)))
        elif self.has_surgeon:
            d = W + 1.0 / kappa2
            out["d"] = d
            out["hss"] = 1.0 / d
            out["logdet"] = float(np.sum(np.log(d)))
        else:
            out["logdet"] = 0.0
        out["leverage"] = out["haa"][hz] + 2.0 * out["has"] + out["hss"]
        return out

    def _solve(self, arrow: dict, W: np.ndarray, ra: np.ndarray, rs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Loest H [da; ds] = [ra; rs] fuer die Pfeilmatrix."""
        hz = self.cell_hospital
        if self.has_hospital and self.has_surgeon:
            d = arrow["d"]
            da = (ra - self.H.T @ (W * rs / d)) / arrow["schur"]
            ds = (rs - W * da[hz]) / d
            return da, ds
        if self.has_hospital:
            return ra / arrow["schur"], np.zeros(self.q)
        if self.has_surgeon:
            return np.zeros(self.m), rs / arrow["d"]
        return np.zeros(self.m), np.zeros(self.q)

    def _mode_gradient(self, mu: np.ndarray, a: np.ndarray, g: np.ndarray, tau2: float, kappa2: float):
        R = self._cell_sum(self.y - mu)
        rs = R - g / kappa2 if self.has_surgeon else np.zeros(self.q)
        ra = self.H.T @ R - a / tau2 if self.has_hospital else np.zeros(self.m)
        return ra, rs

    def find_mode(self, beta: np.ndarray, tau2: float, kappa2: float) -> tuple[np.ndarray, np.ndarray]:
        """Newton mit Schrittweitenhalbierung fuer den Modus der Random Effects.

        Konvergiert bei max |Gradient| < inner_tol oder Newton-Dekrement r' H^-1 r < inner_tol**2;
        das Dekrement bleibt auch bei Varianzen nahe 0 (Prior-Terme 1/tau2) aussagekraeftig.
        Bringt kein Schritt mehr einen messbaren Anstieg (Rundungsgrenze), genuegt ein Dekrement
        unter MODE_STALL_DECREMENT.
        """
        eta0 = self.D @ beta
        a = self.a.copy() if self.has_hospital else np.zeros(self.m)
        g = self.g.copy() if self.has_surgeon else np.zeros(self.q)
        if not (self.has_hospital or self.has_surgeon):
            return a, g

        eta = self._linear_predictor(eta0, a, g)
        value = self._joint(eta, a, g, tau2, kappa2)
        converged = False
        decrement = math.inf
        for _ in range(self.opts.max_inner):
            mu = expit(eta)
            ra, rs = self._mode_gradient(mu, a, g, tau2, kappa2)
            gnorm = max(np.max(np.abs(ra), initial=0.0), np.max(np.abs(rs), initial=0.0))
            if gnorm < self.opts.inner_tol:
                converged = True
                break
            W = self._cell_sum(mu * (1.0 - mu))
            da, ds = self._solve(self._arrow(W, tau2, kappa2), W, ra, rs)
            decrement = float(ra @ da + rs @ ds)
            t = 1.0
            improved = False
            for _ in range(MAX_HALVINGS):
                a_new, g_new = a + t * da, g + t * ds
                eta_new = self._linear_predictor(eta0, a_new, g_new)
                value_new = self._joint(eta_new, a_new, g_new, tau2, kappa2)
                if value_new - value > STALL_GAIN * max(1.0, abs(value)):
                    improved = True
                    break
                t *= 0.5
            if improved:
                a, g, eta, value = a_new, g_new, eta_new, value_new
            else:
                # Rundungsgrenze: voller Newton-Schritt verkleinert den Gradienten weiter
                converged = decrement < MODE_STALL_DECREMENT
                if converged:
                    a, g = a + da, g + ds
                break
            if decrement < self.opts.inner_tol**2:
                converged = True
                break

        if not converged:
            raise ConvergenceError(
                f"Modus der Random Effects nicht gefunden (Newton-Dekrement = {decrement:.3e})"
            )

        self.a, self.g = a, g
        return a, g

    def evaluate(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """(Laplace-Log-Likelihood, Gradient nach theta)."""
        beta, tau2, kappa2 = self.unpack(theta)
        a, g = self.find_mode(beta, tau2, kappa2)
        eta = self._linear_predictor(self.D @ beta, a, g)
        mu = expit(eta)
        w = mu * (1.0 - mu)
        W = self._cell_sum(w)
        arrow = self._arrow(W, tau2, kappa2)

        ll = float(np.sum(self.y * eta - np.logaddexp(0.0, eta))) - 0.5 * arrow["logdet"]
        if self.has_hospital:
            ll -= float(a @ a) / (2.0 * tau2) + 0.5 * self.m * math.log(tau2)
        if self.has_surgeon:
            ll -= float(g @ g) / (2.0 * kappa2) + 0.5 * self.q * math.log(kappa2)

        # Ableitung von log det H nach dem Modus, dann implizite Ableitung des Modus
        w_prime = w * (1.0 - 2.0 * mu)
        leverage = arrow["leverage"]
        T_s = leverage * self._cell_sum(w_prime)
        T_a = self.H.T @ T_s
        v_a, v_s = self._solve(
            arrow, W,
            T_a if self.has_hospital else np.zeros(self.m),
            T_s if self.has_surgeon else np.zeros(self.q),
        )
        v_cell = v_a[self.cell_hospital] + v_s
        WX = np.asarray(self.indicator @ (w[:, None] * self.D))

        grad = [
            self.D.T @ (self.y - mu)
            - 0.5 * self.D.T @ (w_prime * leverage[self.cell])
            + 0.5 * v_cell @ WX
        ]
        if self.has_hospital:
            grad.append(np.array([
                float(a @ a) / (2.0 * tau2) - 0.5 * self.m
                - 0.5 * (-float(np.sum(arrow["haa"])) / tau2 + float(v_a @ a) / tau2)
            ]))
        if self.has_surgeon:
            grad.append(np.array([
                float(g @ g) / (2.0 * kappa2) - 0.5 * self.q
                - 0.5 * (-float(np.sum(arrow["hss"])) / kappa2 + float(v_s @ g) / kappa2)
            ]))
        return ll, np.concatenate(grad)


def _fit_levels(d: DataSet, opts: MixedOptions, levels: tuple[Level, ...], beta_start: np.ndarray | None) -> OutcomeParams:
    lik = LaplaceLikelihood(d, levels, opts)
    if beta_start is None:
        ybar = float(np.mean(d.y))
        beta_start = np.zeros(lik.k)
        beta_start[0] = math.log(ybar / (1.0 - ybar))
    start = np.concatenate([beta_start, np.zeros(lik.n_params - lik.k)])
    bounds = [(None, None)] * lik.k + [LOG_VAR_BOUNDS] * (lik.n_params - lik.k)

    result = maximize_loglik(
        lik.evaluate,
        start,
        bounds=bounds,
        max_iter=opts.max_outer,
        gtol=opts.outer_tol,
        label=f"Logistisches gemischtes Modell {levels or '(ohne Cluster)'}",
    )
    beta, tau2, kappa2 = lik.unpack(result.x)

    log_values = {}
    if lik.has_hospital:
        log_values["tau2"] = math.log(tau2)
    if lik.has_surgeon:
        log_values["kappa2"] = math.log(kappa2)
    level_of = {"tau2": "hospital", "kappa2": "surgeon"}
    for name in boundary_candidates(log_values, opts.boundary_check):
        reduced_levels = tuple(lv for lv in levels if lv != level_of[name])
        reduced = _fit_levels(d, opts, reduced_levels, beta.copy())
        if log_values[name] <= opts.boundary_zero or accepts_reduced(result.loglik, reduced.fit_meta["loglik"]):
            logger.warning(f"Varianz {name} am Rand: auf 0 gesetzt (log-Wert {log_values[name]:.2f})")
            reduced.fit_meta["boundary"] = [name, *reduced.fit_meta.get("boundary", [])]
            return reduced

    a, g = lik.find_mode(beta, tau2, kappa2)
    return OutcomeParams(
        alpha0=float(beta[0]),
        beta=beta[1:].copy(),
        tau2=tau2,
        kappa2=kappa2,
        sigma2=None,
        alpha_z=a.copy() if lik.has_hospital else np.zeros(d.hierarchy.m),
        gamma_zs=g.copy() if lik.has_surgeon else np.zeros(d.hierarchy.q),
        link="logit",
        hierarchy=d.hierarchy,
        levels=tuple(levels),
        fit_meta={
            "loglik": result.loglik,
            "converged": result.converged,
            "iterations": result.iterations,
            "criterion": "Laplace-ML",
            "history": result.history,
            "boundary": [],
        },
    )


def fit_laplace_nested(
    d: DataSet,
    opts: MixedOptions | None = None,
    levels: tuple[Level, ...] = FULL_LEVELS,
) -> OutcomeParams:
    """Laplace-ML-Fit des logistischen Modells mit den angegebenen Levels."""
    opts = opts or MixedOptions()
    if d.outcome_kind != "binary":
        raise DataError("Logistisches Modell braucht binaeres Outcome")
    ybar = float(np.mean(d.y))
    if ybar in (0.0, 1.0):
        raise DataError(f"Outcome ist konstant ({int(ybar)}): logistisches Modell nicht schaetzbar")
    with Timer() as timer:
        params = _fit_levels(d, opts, tuple(levels), None)
    logger.info(
        f"Logistisches Modell {tuple(levels)} in {timer.elapsed:.2f}s: tau2={params.tau2:.4g}, "
        f"kappa2={params.kappa2:.4g}"
    )
    return params
