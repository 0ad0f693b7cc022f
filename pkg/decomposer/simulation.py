"""Simulationsstudie: synthetische Populationen, wahre Komponenten, Replikationsgitter."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from .assignment import cell_probabilities, fit_joint_multinomial, fit_nested_multinomial
from .data import dataset_from_arrays
from .decomposition import (
    decompose_model_based,
    decompose_semiparametric,
    decompose_three_way,
    record_terms,
)
from .errors import ConfigError, ConvergenceError, VarDecompError
from .models import (
    COMPONENT_NAMES,
    AssignmentParams,
    GeneratedPopulation,
    GeneratingParams,
    Hierarchy,
    MixedOptions,
    SimConfig,
    Timer,
    TruthComponents,
    VarianceComponents,
)
from .outcome import fit_marginal_models, fit_outcome_model
from .utils import STREAM_PARAMS, STREAM_SIMULATION, STREAM_TRUTH, chunk_size_for, iter_chunks, spawn_rng

logger = logging.getLogger(__name__)

Mechanism = Literal["fixed", "redraw"]

DEFAULT_N_MC = 200_000
DEFAULT_REPLICATIONS = 200
FULL_REPLICATIONS = 1000
MAX_FAILURE_SHARE = 0.1
LOGISTIC_VARIANCE = math.pi**2 / 3.0
ESTIMATORS = ("model_based", "three_way", "semi_parametric")
DESK_GRID: tuple[tuple[int, int, int], ...] = ((2000, 5, 25), (5000, 5, 25), (2000, 5, 50))


def validate_config(cfg: SimConfig) -> SimConfig:
    if cfg.m < 1 or cfg.n < 1:
        raise ConfigError(f"n und m muessen >= 1 sein (n={cfg.n}, m={cfg.m})")
    if cfg.q < cfg.m:
        raise ConfigError(f"q muss >= m sein (q must be >= m): q={cfg.q}, m={cfg.m}")
    sds = (cfg.effect_sd_hospital, cfg.effect_sd_surgeon, cfg.assign_intercept_sd, cfg.assign_coef_sd)
    if any(sd < 0 for sd in sds):
        raise ConfigError(f"Standardabweichungen muessen >= 0 sein: {sds}")
    if len(cfg.beta) != 2:
        raise ConfigError(f"beta braucht genau 2 Eintraege (x1, x2): {cfg.beta}")
    if cfg.outcome_kind not in ("binary", "continuous"):
        raise ConfigError(f"Unbekannter Outcome-Typ: {cfg.outcome_kind}")
    return cfg


def draw_generating_params(cfg: SimConfig, rng: np.random.Generator) -> GeneratingParams:
    """alpha ~ N(0, sd_h^2), gamma ~ N(0, sd_s^2), Zuweisungs-Logit mit Referenzzelle (1,1)."""
    validate_config(cfg)
    hierarchy = Hierarchy.even_split(cfg.m, cfg.q)
    alpha = rng.normal(0.0, cfg.effect_sd_hospital, cfg.m)
    gamma = rng.normal(0.0, cfg.effect_sd_surgeon, cfg.q)
    coef = np.zeros((cfg.q, 3))
    coef[1:, 0] = rng.normal(0.0, cfg.assign_intercept_sd, cfg.q - 1)
    coef[1:, 1:] = rng.normal(0.0, cfg.assign_coef_sd, (cfg.q - 1, 2))
    eta = AssignmentParams(
        hierarchy=hierarchy,
        structure="joint",
        coef=coef,
        vcov=np.zeros((3 * (cfg.q - 1), 3 * (cfg.q - 1))),
        covariate_names=("x1", "x2"),
    )
    return GeneratingParams(
        hierarchy=hierarchy,
        alpha=alpha,
        gamma=gamma,
        eta=eta,
        beta=np.asarray(cfg.beta, dtype=float),
        outcome_kind=cfg.outcome_kind,
    )


def _draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x1 = rng.standard_normal(n)
    x2 = rng.binomial(1, 0.5, n).astype(float)
    return np.column_stack([x1, x2])


def generate_population(
    cfg: SimConfig,
    params: GeneratingParams | None = None,
    rng: np.random.Generator | None = None,
) -> GeneratedPopulation:
    """Zieht X, (Z, S) aus dem Zuweisungsmodell und Y = alpha_Z + gamma_ZS + beta'X + eps.

    eps ~ Logistic(0, 1); binaeres Y = 1{Y_stetig >= 0}.
    Zellen ohne Patienten fallen aus dem Datensatz und stehen in empty_cells.
    """
    validate_config(cfg)
    if params is None:
        params = draw_generating_params(cfg, spawn_rng(cfg.seed, STREAM_PARAMS))
    rng = rng or spawn_rng(cfg.seed, STREAM_SIMULATION)
    h = params.hierarchy

    X = _draw_covariates(rng, cfg.n)
    P = cell_probabilities(params.eta, X)
    u = rng.random(cfg.n)
    cell = np.minimum((u[:, None] > np.cumsum(P, axis=1)).sum(axis=1), h.q - 1)
    hospital = h.cell_hospital[cell]
    eps = rng.logistic(0.0, 1.0, cfg.n)
    y_latent = params.alpha[hospital] + params.gamma[cell] + X @ params.beta + eps
    y = y_latent if cfg.outcome_kind == "continuous" else (y_latent >= 0.0).astype(float)

    counts = np.bincount(cell, minlength=h.q)
    empty_cells = tuple(
        (int(h.cell_hospital[c]) + 1, int(c - h.cell_offsets[h.cell_hospital[c]]) + 1)
        for c in np.flatnonzero(counts == 0)
    )
    if empty_cells:
        logger.warning(
            f"{len(empty_cells)} von {h.q} Zellen ohne Patienten {list(empty_cells)}; Hierarchie wird verkleinert"
        )

    dataset = dataset_from_arrays(
        y=y,
        hospital_labels=hospital + 1,
        surgeon_labels=cell - h.cell_offsets[hospital] + 1,
        X=X,
        covariate_names=("x1", "x2"),
        outcome_kind=cfg.outcome_kind,
    )
    return GeneratedPopulation(dataset=dataset, params=params, empty_cells=empty_cells)


def true_components(
    params: GeneratingParams,
    n_mc: int = DEFAULT_N_MC,
    seed: int = 0,
) -> TruthComponents:
    """Monte Carlo ueber X mit exakten inneren Summen ueber die Zellen."""
    h = params.hierarchy
    rng = spawn_rng(seed, STREAM_TRUTH)
    X = _draw_covariates(rng, n_mc)
    effects = params.alpha[h.cell_hospital] + params.gamma

    overall = np.empty(n_mc)
    terms = {name: np.empty(n_mc) for name in COMPONENT_NAMES[1:]}
    for sl in iter_chunks(n_mc, chunk_size_for(h.q)):
        linear = (X[sl] @ params.beta)[:, None] + effects[None, :]
        if params.outcome_kind == "binary":
            mu = expit(linear)
            V = mu * (1.0 - mu)
        else:
            mu = linear
            V = np.full_like(mu, LOGISTIC_VARIANCE)
        rt = record_terms(mu, cell_probabilities(params.eta, X[sl]), V, h)
        overall[sl] = rt.overall
        terms["omega2"][sl] = rt.between_hospital
        terms["omega3"][sl] = rt.between_surgeon
        terms["omega4"][sl] = rt.residual

    centered = overall - overall[0]
    squared = (centered - centered.mean()) ** 2
    samples = [squared, terms["omega2"], terms["omega3"], terms["omega4"]]
    root_n = math.sqrt(n_mc)
    return TruthComponents(
        omega=tuple(float(np.mean(s)) for s in samples),
        se=tuple(float(np.std(s, ddof=1)) / root_n if n_mc > 1 else 0.0 for s in samples),
        n_mc=n_mc,
    )


@dataclass
class ReplicationResult:
    """Langformat-Tabelle aller Replikate plus Zusammenfassung gegen die Wahrheit."""
    config: SimConfig
    table: pd.DataFrame
    truth: TruthComponents
    summary: dict
    failed: list[int] = field(default_factory=list)
    shrunk: list[int] = field(default_factory=list)

    @property
    def scenario(self) -> str:
        return scenario_name(self.config)


def scenario_name(cfg: SimConfig) -> str:
    return f"n{cfg.n}_m{cfg.m}_q{cfg.q}"


def _estimate(
    d,
    estimators: Iterable[str],
    opts: MixedOptions | None,
    nested_assignment: bool,
) -> dict[str, VarianceComponents]:
    eta = fit_nested_multinomial(d) if nested_assignment else fit_joint_multinomial(d)
    theta = fit_outcome_model(d, opts)
    results: dict[str, VarianceComponents] = {}
    if "model_based" in estimators:
        results["model_based"] = decompose_model_based(d, theta, eta)
    if "three_way" in estimators:
        results["three_way"] = decompose_three_way(d, theta, eta, residual_mode="model_based")
    if "semi_parametric" in estimators:
        results["semi_parametric"] = decompose_semiparametric(
            d, fit_marginal_models(d, opts, model_szx=theta)
        )
    return results


def _replicate(
    cfg: SimConfig,
    params: GeneratingParams | None,
    seed: int,
    replicate: int,
    estimators: tuple[str, ...],
    opts: MixedOptions | None,
    nested_assignment: bool,
    n_mc: int,
) -> tuple[list[tuple], TruthComponents | None, int] | None:
    truth = None
    if params is None:
        params = draw_generating_params(cfg, spawn_rng(seed, STREAM_PARAMS, replicate))
        truth = true_components(params, n_mc, seed=seed + replicate)
    population = generate_population(cfg, params, spawn_rng(seed, STREAM_SIMULATION, replicate))
    try:
        results = _estimate(population.dataset, estimators, opts, nested_assignment)
    except VarDecompError as exc:
        logger.warning(f"Replikat {replicate} gescheitert: {exc}")
        return None

    rows = []
    for method, vc in results.items():
        for name, value in zip(COMPONENT_NAMES, vc.as_array()):
            if method == "three_way" and name == "omega3":
                continue
            rows.append((replicate, method, name, float(value)))
    return rows, truth, len(population.empty_cells)


def _average_truth(truths: list[TruthComponents]) -> TruthComponents:
    values = np.array([t.omega for t in truths])
    n = values.shape[0]
    se = values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(4)
    return TruthComponents(
        omega=tuple(float(v) for v in values.mean(axis=0)),
        se=tuple(float(v) for v in se),
        n_mc=truths[0].n_mc if truths else 0,
    )


def summarize_replications(table: pd.DataFrame, truth: TruthComponents) -> dict:
    """Mittelwert, Stichproben-SD, 2.5/97.5 %-Quantile und MC-KI des Mittels je Methode."""
    truth_of = dict(zip(COMPONENT_NAMES, truth.omega))
    summary: dict = {"truth": truth.to_dict(), "methods": {}}
    for (method, component), group in table.groupby(["method", "component"], sort=True):
        values = group["estimate"].to_numpy()
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
        half = 1.96 * sd / math.sqrt(values.size)
        lower, upper = np.quantile(values, [0.025, 0.975])
        summary["methods"].setdefault(method, {})[component] = {
            "n": int(values.size),
            "mean": mean,
            "sd": sd,
            "q025": float(lower),
            "q975": float(upper),
            "mc_ci": [mean - half, mean + half],
            "truth": truth_of[component],
            "bias": mean - truth_of[component],
        }

    wide = table.pivot_table(index="replicate", columns=["method", "component"], values="estimate")
    if ("three_way", "omega4") in wide.columns and ("model_based", "omega3") in wide.columns:
        residual = wide[("three_way", "omega4")]
        four_way = wide[("model_based", "omega3")] + wide[("model_based", "omega4")]
        summary["three_vs_four_way"] = {
            "three_way_residual_mean": float(residual.mean()),
            "omega3_plus_omega4_mean": float(four_way.mean()),
            "max_abs_diff": float(np.max(np.abs(residual - four_way))),
        }
    return summary


def run_replications(
    cfg: SimConfig,
    replications: int = DEFAULT_REPLICATIONS,
    estimators: Iterable[str] = ESTIMATORS,
    seed: int | None = None,
    mechanism: Mechanism = "fixed",
    n_mc: int = DEFAULT_N_MC,
    opts: MixedOptions | None = None,
    nested_assignment: bool = False,
    n_jobs: int = 1,
    max_failure_share: float = MAX_FAILURE_SHARE,
) -> ReplicationResult:
    """Replikationsgitter fuer ein Szenario.

    mechanism="fixed": (alpha, gamma, eta) einmal gezogen, Wahrheit einmal berechnet.
    mechanism="redraw": Parameter je Replikat neu, Wahrheit als Mittel der Replikat-Wahrheiten.
    """
    validate_config(cfg)
    estimators = tuple(estimators)
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ConfigError(f"Unbekannte Schaetzer: {sorted(unknown)}")
    seed = cfg.seed if seed is None else seed

    fixed_params = None
    truth = None
    if mechanism == "fixed":
        fixed_params = draw_generating_params(cfg, spawn_rng(seed, STREAM_PARAMS))
        truth = true_components(fixed_params, n_mc, seed=seed)
    replicate_mc = n_mc if mechanism == "fixed" else max(10_000, n_mc // 20)

    with Timer(f"Replikate {scenario_name(cfg)}") as timer:
        outputs = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(cfg, fixed_params, seed, r, estimators, opts, nested_assignment, replicate_mc)
            for r in range(replications)
        )
    failed = [r for r, out in enumerate(outputs) if out is None]
    if failed:
        logger.warning(f"{scenario_name(cfg)}: {len(failed)} von {replications} Replikaten gescheitert")
    if len(failed) > max_failure_share * replications:
        raise ConvergenceError(
            f"Zu viele gescheiterte Replikate in {scenario_name(cfg)}: {len(failed)} von {replications}"
        )

    shrunk = [r for r, out in enumerate(outputs) if out is not None and out[2] > 0]
    if shrunk:
        logger.warning(
            f"{scenario_name(cfg)}: {len(shrunk)} Replikate mit leeren Zellen (kleinere Hierarchie als die Wahrheit)"
        )
    rows = [row for out in outputs if out is not None for row in out[0]]
    table = pd.DataFrame(rows, columns=["replicate", "method", "component", "estimate"])
    if truth is None:
        truth = _average_truth([out[1] for out in outputs if out is not None])
    summary = summarize_replications(table, truth)
    summary["replicates_with_empty_cells"] = shrunk
    logger.info(
        f"{scenario_name(cfg)}: {replications - len(failed)} Replikate in {timer.elapsed:.1f}s"
    )
    return ReplicationResult(
        config=cfg,
        table=table,
        truth=truth,
        summary=summary,
        failed=failed,
        shrunk=shrunk,
    )
