"""vardecomp: kausale Vierfach-Varianzzerlegung fuer Outcomes unter Klinik/Chirurg-Clustering.

Methode 1 (model):        Modellbasiert ueber gefittete mu, e, g: Komponenten omega1..omega4
Methode 2 (semi):         Semiparametrisch ueber E[Y|X], E[Y|Z,X], E[Y|S,Z,X]
Methode 3 (threeway):     Fallmix, Klinik, Residuum (ohne Chirurgenebene)
Methode 4 (hypothetical): Vierfach-Zerlegung unter einer Ziel-Zuweisung (uniform, volume, ...)

Dazu: Posterior-Intervalle (Bootstrap + Normalapproximation), Simulationsstudie,
Brute-Force-Oracle auf diskreten Instanzen.
"""

from .errors import ConfigError, ConvergenceError, DataError, SeparationError, VarDecompError
from .models import (
    AssignmentParams,
    DataSet,
    Hierarchy,
    MixedOptions,
    MultinomialOptions,
    OutcomeParams,
    SimConfig,
    TargetAssignment,
    VarianceComponents,
)
from .data import ColumnSchema, dataset_from_arrays, empirical_variance, load_dataset, positivity_report
from .assignment import cell_probabilities, fit_joint_multinomial, fit_nested_multinomial
from .outcome import fit_marginal_models, fit_outcome_model, predict_mu
from .decomposition import (
    decompose_hypothetical,
    decompose_model_based,
    decompose_semiparametric,
    decompose_three_way,
    uniform_target,
    volume_preserving_target,
)
from .oracle import enumerate_decomposition, load_instance
from .uncertainty import component_posterior
from .simulation import generate_population, run_replications, true_components

__all__ = [
    "VarDecompError",
    "ConfigError",
    "DataError",
    "ConvergenceError",
    "SeparationError",
    "AssignmentParams",
    "DataSet",
    "Hierarchy",
    "MixedOptions",
    "MultinomialOptions",
    "OutcomeParams",
    "SimConfig",
    "TargetAssignment",
    "VarianceComponents",
    "ColumnSchema",
    "dataset_from_arrays",
    "empirical_variance",
    "load_dataset",
    "positivity_report",
    "cell_probabilities",
    "fit_joint_multinomial",
    "fit_nested_multinomial",
    "fit_marginal_models",
    "fit_outcome_model",
    "predict_mu",
    "decompose_hypothetical",
    "decompose_model_based",
    "decompose_semiparametric",
    "decompose_three_way",
    "uniform_target",
    "volume_preserving_target",
    "enumerate_decomposition",
    "load_instance",
    "component_posterior",
    "generate_population",
    "run_replications",
    "true_components",
]
