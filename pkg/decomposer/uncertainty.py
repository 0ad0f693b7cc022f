"""Posterior-Unsicherheit der Komponenten: parametrischer Bootstrap fuer theta,
Normalapproximation fuer eta, beide mit eigenen Zufallsstroemen."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg
from scipy.special import expit

from .decomposition import decompose_model_based
from .errors import ConvergenceError, DataError
from .models import (
    COMPONENT_NAMES,
    AssignmentParams,
    ComponentDraws,
    ComponentInterval,
    ComponentIntervals,
    DataSet,
    MixedOptions,
    OutcomeParams,
    Timer,
)
from .outcome import fit_outcome_model
from .utils import STREAM_ETA, STREAM_THETA, spawn_rng

logger = logging.getLogger(__name__)

ResampleMode = Literal["redraw", "fixed"]

DEFAULT_DRAWS = 1000
DEFAULT_LEVEL = 0.95
MAX_FAILURE_SHARE = 0.2


def sample_eta(eta: AssignmentParams, R: int, seed: int) -> list[AssignmentParams]:
    """R Ziehungen aus MVN(eta_hat, V(eta_hat)) ueber eine symmetrische Wurzel von V."""
    k = eta.n_free
    if eta.vcov.shape != (k, k):
        raise ValueError(f"vcov hat Form {eta.vcov.shape}, erwartet ({k}, {k})")
    if R <= 0:
        return []

    values, vectors = linalg.eigh(0.5 * (eta.vcov + eta.vcov.T)) if k else (np.zeros(0), np.zeros((0, 0)))
    scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
    if values.size and values.min() < -1e-10 * scale:
        logger.warning(f"vcov nicht positiv semidefinit (min Eigenwert {values.min():.3e}): auf 0 begrenzt")
    root = vectors * np.sqrt(np.clip(values, 0.0, None))

    rng = spawn_rng(seed, STREAM_ETA)
    normals = rng.standard_normal((R, k))
    draws = eta.free_vector() + normals @ root.T
    return [eta.with_free_vector(row) for row in draws]


def simulate_outcomes(
    d: DataSet,
    theta: OutcomeParams,
    rng: np.random.Generator,
    resample_effects: ResampleMode = "redraw",
) -> np.ndarray:
    """Neue Outcomes aus dem gefitteten Modell an den beobachteten (z, s, x)."""
    h = d.hierarchy
    if resample_effects == "redraw":
        alpha = rng.normal(0.0, np.sqrt(theta.tau2), h.m)
        gamma = rng.normal(0.0, np.sqrt(theta.kappa2), h.q)
    else:
        alpha, gamma = theta.alpha_z, theta.gamma_zs
    eta = theta.alpha0 + d.X @ theta.beta + alpha[d.hospital - 1] + gamma[d.cell]
    if theta.link == "logit":
        return (rng.random(d.n) < expit(eta)).astype(float)
    return eta + rng.normal(0.0, np.sqrt(theta.sigma2), d.n)


def _bootstrap_replicate(
    d: DataSet,
    theta: OutcomeParams,
    seed: int,
    replicate: int,
    opts: MixedOptions | None,
    resample_effects: ResampleMode,
) -> OutcomeParams | None:
    rng = spawn_rng(seed, STREAM_THETA, replicate)
    y = simulate_outcomes(d, theta, rng, resample_effects)
    try:
        return fit_outcome_model(d.with_outcome(y), opts)
    except (ConvergenceError, DataError) as exc:
        logger.warning(f"Bootstrap-Replikat {replicate} gescheitert: {exc}")
        return None


def _check_failures(failed: list[int], R: int, max_failure_share: float):
    if failed:
        logger.warning(f"{len(failed)} von {R} Bootstrap-Refits gescheitert")
    if len(failed) > max_failure_share * R:
        raise ConvergenceError(
            f"Zu viele gescheiterte Bootstrap-Refits: {len(failed)} von {R} "
            f"(Grenze {max_failure_share:.0%}); erste: {failed[:10]}"
        )


def bootstrap_theta(
    d: DataSet,
    theta: OutcomeParams,
    R: int,
    seed: int,
    opts: MixedOptions | None = None,
    resample_effects: ResampleMode = "redraw",
    n_jobs: int = 1,
    max_failure_share: float = MAX_FAILURE_SHARE,
) -> list[OutcomeParams | None]:
    """Parametrischer Bootstrap: Outcomes simulieren, gemischtes Modell neu fitten.

    Eintrag r ist None, wenn der Refit von Replikat r gescheitert ist.
    """
    if R <= 0:
        return []
    results = Parallel(n_jobs=n_jobs)(
        delayed(_bootstrap_replicate)(d, theta, seed, r, opts, resample_effects) for r in range(R)
    )
    _check_failures([r for r, res in enumerate(results) if res is None], R, max_failure_share)
    return results


def _posterior_replicate(
    d: DataSet,
    theta: OutcomeParams,
    eta_draw: AssignmentParams,
    seed: int,
    replicate: int,
    opts: MixedOptions | None,
    resample_effects: ResampleMode,
) -> np.ndarray | None:
    refit = _bootstrap_replicate(d, theta, seed, replicate, opts, resample_effects)
    if refit is None:
        return None
    return decompose_model_based(d, refit, eta_draw).as_array()


def summarize_draws(draws: np.ndarray, point: np.ndarray, level: float) -> ComponentIntervals:
    lower_q, upper_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    components = {}
    for j, name in enumerate(COMPONENT_NAMES):
        column = draws[:, j] if draws.size else np.zeros(0)
        if column.size:
            lower, median, upper = np.quantile(column, [lower_q, 0.5, upper_q])
            sd = float(np.std(column, ddof=1)) if column.size > 1 else 0.0
            mean = float(np.mean(column))
        else:
            lower = median = upper = mean = sd = float("nan")
        components[name] = ComponentInterval(
            point=float(point[j]),
            lower=float(lower),
            upper=float(upper),
            mean=mean,
            sd=sd,
            median=float(median),
        )
    return ComponentIntervals(level=level, components=components)


def component_posterior(
    d: DataSet,
    theta: OutcomeParams,
    eta: AssignmentParams,
    R: int = DEFAULT_DRAWS,
    seed: int = 0,
    level: float = DEFAULT_LEVEL,
    opts: MixedOptions | None = None,
    resample_effects: ResampleMode = "redraw",
    n_jobs: int = 1,
    max_failure_share: float = MAX_FAILURE_SHARE,
) -> tuple[ComponentDraws, ComponentIntervals]:
    """Paart Bootstrap-theta r mit eta-Ziehung r und zerlegt je Paar neu.

    Returns:
        (Ziehungen, gleichschwaenzige Quantilsintervalle zum Niveau level)
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"Niveau muss in (0, 1) liegen: {level}")
    point = decompose_model_based(d, theta, eta).as_array()
    eta_draws = sample_eta(eta, R, seed)

    with Timer("Posterior-Ziehungen") as timer:
        results = Parallel(n_jobs=n_jobs)(
            delayed(_posterior_replicate)(d, theta, eta_draws[r], seed, r, opts, resample_effects)
            for r in range(R)
        )
    failed = [r for r, res in enumerate(results) if res is None]
    _check_failures(failed, R, max_failure_share)

    index = np.array([r for r, res in enumerate(results) if res is not None], dtype=np.int64)
    draws = np.array([res for res in results if res is not None]).reshape(-1, 4)
    logger.info(f"Posterior: {draws.shape[0]} Ziehungen in {timer.elapsed:.1f}s")
    component_draws = ComponentDraws(
        draws=draws,
        seed=seed,
        replicate_index=index,
        negative_rows=np.any(draws < 0, axis=1),
        failed_replicates=failed,
    )
    return component_draws, summarize_draws(draws, point, level)


def write_draws_csv(draws: ComponentDraws, output_path: Path) -> Path:
    """CSV `replicate,omega1,omega2,omega3,omega4`."""
    output_path = Path(output_path)
    frame = pd.DataFrame(draws.draws, columns=list(COMPONENT_NAMES))
    frame.insert(0, "replicate", draws.replicate_index)
    frame.to_csv(output_path, index=False, lineterminator="\n")
    logger.info(f"Geschrieben: {output_path}")
    return output_path
