"""Aeussere Optimierung (L-BFGS-B) und Randpruefung der Varianzparameter."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ConvergenceError

logger = logging.getLogger(__name__)

LOG_VAR_BOUNDS = (-25.0, 15.0)
FTOL = 1e-15


@dataclass
class OuterResult:
    x: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    message: str
    history: list[float] = field(default_factory=list)


def maximize_loglik(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    bounds: Sequence[tuple[float | None, float | None]],
    max_iter: int,
    gtol: float,
    label: str,
) -> OuterResult:
    """Maximiert objective(x) -> (loglik, gradient) mit L-BFGS-B.

    history enthaelt die Log-Likelihood der akzeptierten Iterierten.
    """
    history: list[float] = []
    last: dict = {}

    def negative(x: np.ndarray):
        ll, grad = objective(x)
        last["x"], last["ll"] = x.copy(), ll
        return -ll, -grad

    def callback(xk: np.ndarray):
        if "x" in last and np.array_equal(last["x"], xk):
            history.append(last["ll"])
        else:
            history.append(objective(xk)[0])
        logger.debug(f"{label}: Iteration {len(history)}, loglik={history[-1]:.10f}")

    x0 = np.asarray(x0, dtype=float)
    history.append(objective(x0)[0])
    res = minimize(
        negative,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(bounds),
        callback=callback,
        options={"maxiter": max_iter, "ftol": FTOL, "gtol": gtol, "maxcor": 20},
    )
    loglik, grad = objective(res.x)

    projected = grad.copy()
    for i, (lower, upper) in enumerate(bounds):
        if lower is not None and res.x[i] <= lower and grad[i] < 0:
            projected[i] = 0.0
        if upper is not None and res.x[i] >= upper and grad[i] > 0:
            projected[i] = 0.0
    small_gradient = np.max(np.abs(projected), initial=0.0) < 1e-5 * max(1.0, abs(loglik))
    converged = bool(res.success or small_gradient)
    if not converged:
        raise ConvergenceError(
            f"{label}: Optimierer nicht konvergiert nach {res.nit} Iterationen ({res.message}); "
            f"max |Gradient| = {np.max(np.abs(projected)):.3e}"
        )
    return OuterResult(
        x=res.x,
        loglik=float(loglik),
        iterations=int(res.nit),
        converged=converged,
        message=str(res.message),
        history=history,
    )


def boundary_candidates(
    log_variances: dict[str, float],
    threshold: float,
) -> list[str]:
    """Level mit log-Varianz unter threshold, kleinste zuerst."""
    return sorted(
        (name for name, value in log_variances.items() if value < threshold),
        key=lambda name: log_variances[name],
    )


def accepts_reduced(full_loglik: float, reduced_loglik: float) -> bool:
    """Reduziertes Modell (Varianz exakt 0) ist mindestens so gut wie das volle."""
    return reduced_loglik >= full_loglik - 1e-8 * max(1.0, abs(full_loglik))
