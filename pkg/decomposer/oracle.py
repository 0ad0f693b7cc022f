"""Brute-Force-Auswertung der Vierfach-Zerlegung auf diskreten Instanzen.

Keine Daten, kein Fit: die Terme werden mit expliziten Schleifen ueber Stuetzpunkte,
Kliniken und Chirurgen summiert.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decomposition import decompose_arrays
from .errors import DataError
from .models import DiscreteInstance, Hierarchy, TargetAssignment, VarianceComponents

logger = logging.getLogger(__name__)

FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures"
TOL = 1e-12


def load_instance(path: Path) -> DiscreteInstance:
    """Liest eine DiscreteInstance aus JSON.

    Format: surgeons_per_hospital, x_support (K x p), x_prob (K), cell_mu (K x q),
    cell_assign (K x q), optional cell_condvar (K x q; Default mu(1-mu) fuer binaer).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Fixture nicht gefunden: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"Fixture ist kein gueltiges JSON ({path.name}): {exc}") from exc

    mu = np.asarray(raw["cell_mu"], dtype=float)
    kind = raw.get("outcome_kind", "binary")
    condvar = raw.get("cell_condvar")
    instance = DiscreteInstance(
        hierarchy=Hierarchy(tuple(raw["surgeons_per_hospital"])),
        x_support=np.asarray(raw["x_support"], dtype=float).reshape(len(raw["x_prob"]), -1),
        x_prob=np.asarray(raw["x_prob"], dtype=float),
        cell_mu=mu,
        cell_assign=np.asarray(raw["cell_assign"], dtype=float),
        cell_condvar=np.asarray(condvar, dtype=float) if condvar is not None else mu * (1.0 - mu),
        name=raw.get("name", path.stem),
        outcome_kind=kind,
    )
    validate_instance(instance)
    return instance


def validate_instance(inst: DiscreteInstance) -> None:
    K, q = inst.x_prob.shape[0], inst.hierarchy.q
    for label, table in (("cell_mu", inst.cell_mu), ("cell_assign", inst.cell_assign),
                         ("cell_condvar", inst.cell_condvar)):
        if table.shape != (K, q):
            raise DataError(f"{inst.name}: {label} hat Form {table.shape}, erwartet ({K}, {q})")
    if abs(float(np.sum(inst.x_prob)) - 1.0) > TOL or np.any(inst.x_prob < 0):
        raise DataError(f"{inst.name}: x_prob summiert nicht zu 1")
    if np.any(inst.cell_assign < 0) or np.max(np.abs(inst.cell_assign.sum(axis=1) - 1.0)) > TOL:
        raise DataError(f"{inst.name}: Zeilen von cell_assign summieren nicht zu 1")
    if np.any(inst.cell_condvar < 0):
        raise DataError(f"{inst.name}: negative bedingte Varianz")
    if inst.outcome_kind == "binary" and np.max(
        np.abs(inst.cell_condvar - inst.cell_mu * (1.0 - inst.cell_mu))
    ) > TOL:
        raise DataError(f"{inst.name}: binaere Instanz braucht cell_condvar = mu(1-mu)")


def _enumerate(inst: DiscreteInstance, assign: np.ndarray, method: str) -> VarianceComponents:
    h = inst.hierarchy
    cells = h.cells()
    K = inst.x_prob.shape[0]

    overall = []
    omega2 = omega3 = omega4 = 0.0
    for k in range(K):
        prob = {cell: assign[k, c] for c, cell in enumerate(cells)}
        mean = {cell: inst.cell_mu[k, c] for c, cell in enumerate(cells)}
        var = {cell: inst.cell_condvar[k, c] for c, cell in enumerate(cells)}

        e = {}
        hospital_mean = {}
        for z in range(1, h.m + 1):
            mass = sum(prob[(z, s)] for s in range(1, h.surgeons_per_hospital[z - 1] + 1))
            if mass <= 0.0:
                # Klinik bei diesem x unerreichbar: Gewicht 0
                continue
            e[z] = mass
            # Mittel relativ zum ersten Chirurgen: gleiche Zellmittel ergeben exakt 0
            first = mean[(z, 1)]
            hospital_mean[z] = first + sum(
                (mean[(z, s)] - first) * prob[(z, s)] / e[z]
                for s in range(1, h.surgeons_per_hospital[z - 1] + 1)
            )
        grand = sum(e[z] * hospital_mean[z] for z in e)
        overall.append(grand)

        term2 = sum(e[z] * (hospital_mean[z] - grand) ** 2 for z in e)
        term3 = 0.0
        term4 = 0.0
        for z in e:
            for s in range(1, h.surgeons_per_hospital[z - 1] + 1):
                g = prob[(z, s)] / e[z]
                term3 += e[z] * g * (mean[(z, s)] - hospital_mean[z]) ** 2
                term4 += e[z] * g * var[(z, s)]
        omega2 += inst.x_prob[k] * term2
        omega3 += inst.x_prob[k] * term3
        omega4 += inst.x_prob[k] * term4

    shifted = [value - overall[0] for value in overall]
    expected = sum(inst.x_prob[k] * shifted[k] for k in range(K))
    omega1 = sum(inst.x_prob[k] * (shifted[k] - expected) ** 2 for k in range(K))
    return VarianceComponents(
        omega1=float(omega1),
        omega2=float(omega2),
        omega3=float(omega3),
        omega4=float(omega4),
        total=float(omega1 + omega2 + omega3 + omega4),
        method=method,
        residual_mode="model_based",
    )


def enumerate_decomposition(inst: DiscreteInstance) -> VarianceComponents:
    """Exakte Summation aller vier Terme ueber x_support und Zellen."""
    validate_instance(inst)
    return _enumerate(inst, inst.cell_assign, "model_based")


def target_table(inst: DiscreteInstance, target: TargetAssignment) -> np.ndarray:
    if target.hierarchy != inst.hierarchy:
        raise DataError(f"{inst.name}: Ziel-Zuweisung passt nicht zur Hierarchie")
    table = np.asarray(target.cell_probabilities(inst.x_support), dtype=float)
    if table.shape != inst.cell_assign.shape:
        raise DataError(f"{inst.name}: Ziel-Tabelle hat Form {table.shape}")
    if np.any(table <= 0):
        raise DataError(f"{inst.name}: Zielwahrscheinlichkeit 0 fuer eine Zelle")
    return table


def enumerate_hypothetical(inst: DiscreteInstance, target: TargetAssignment) -> VarianceComponents:
    """Exakte Auswertung mit e~, g~ anstelle der Instanz-Zuweisung."""
    validate_instance(inst)
    return _enumerate(inst, target_table(inst, target), "hypothetical")


def marginal_variance(inst: DiscreteInstance) -> float:
    """V[Y] = E[Y^2] - E[Y]^2 direkt aus der Instanz."""
    second = float(np.sum(inst.x_prob[:, None] * inst.cell_assign * (inst.cell_condvar + inst.cell_mu**2)))
    first = float(np.sum(inst.x_prob[:, None] * inst.cell_assign * inst.cell_mu))
    return second - first**2


def estimator_on_instance(inst: DiscreteInstance) -> VarianceComponents:
    """Schaetzer-Code mit exakten Eingaben; Stuetzpunkte als gewichtete Empirie."""
    return decompose_arrays(
        inst.cell_mu, inst.cell_assign, inst.cell_condvar, inst.hierarchy, weights=inst.x_prob
    )


@dataclass
class OracleCheck:
    name: str
    oracle: VarianceComponents
    estimator: VarianceComponents
    marginal_variance: float

    @property
    def max_abs_diff(self) -> float:
        return float(np.max(np.abs(self.oracle.as_array() - self.estimator.as_array())))

    @property
    def additivity_gap(self) -> float:
        return abs(self.oracle.total - self.marginal_variance)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "oracle": self.oracle.to_dict(),
            "estimator": self.estimator.to_dict(),
            "marginal_variance": self.marginal_variance,
            "max_abs_diff": self.max_abs_diff,
            "additivity_gap": self.additivity_gap,
        }


def fixture_paths(directory: Path = FIXTURE_DIR) -> list[Path]:
    return sorted(Path(directory).glob("*.json"))


def check_instances(paths: list[Path]) -> list[OracleCheck]:
    results = []
    for path in paths:
        inst = load_instance(path)
        check = OracleCheck(
            name=inst.name,
            oracle=enumerate_decomposition(inst),
            estimator=estimator_on_instance(inst),
            marginal_variance=marginal_variance(inst),
        )
        logger.info(
            f"{inst.name}: max |Oracle - Schaetzer| = {check.max_abs_diff:.2e}, "
            f"Additivitaet {check.additivity_gap:.2e}"
        )
        results.append(check)
    return results
