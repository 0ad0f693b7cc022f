"""Datenmodelle fuer die hierarchische Varianzzerlegung."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Literal, Optional

import numpy as np

logger = logging.getLogger(__name__)

OutcomeKind = Literal["continuous", "binary"]
Link = Literal["identity", "logit"]
Level = Literal["hospital", "surgeon"]
Method = Literal["model_based", "semi_parametric", "three_way", "hypothetical"]
ResidualMode = Literal["by_subtraction", "model_based"]
TargetKind = Literal["observed", "volume_preserving", "uniform", "custom"]

FULL_LEVELS: tuple[Level, ...] = ("hospital", "surgeon")
COMPONENT_NAMES = ("omega1", "omega2", "omega3", "omega4")


@dataclass(frozen=True)
class Hierarchy:
    """Verschachtelter Cluster-Index: m Kliniken mit je h_z Chirurgen.

    Zellen werden dicht durchnummeriert (Klinik-major), Ids nach aussen sind 1-basiert.
    """
    surgeons_per_hospital: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(h) for h in self.surgeons_per_hospital)
        if not counts:
            raise ValueError("Hierarchie braucht mindestens eine Klinik")
        if any(h < 1 for h in counts):
            raise ValueError(f"Jede Klinik braucht mindestens einen Chirurgen: {counts}")
        object.__setattr__(self, "surgeons_per_hospital", counts)

    @classmethod
    def even_split(cls, m: int, q: int) -> "Hierarchy":
        """h_z = floor(q/m) + (1 falls z <= q mod m)."""
        base, extra = divmod(q, m)
        return cls(tuple(base + (1 if z < extra else 0) for z in range(m)))

    @property
    def m(self) -> int:
        return len(self.surgeons_per_hospital)

    @property
    def q(self) -> int:
        return sum(self.surgeons_per_hospital)

    @cached_property
    def cell_offsets(self) -> np.ndarray:
        """Index der ersten Zelle je Klinik (Laenge m+1)."""
        return np.concatenate([[0], np.cumsum(self.surgeons_per_hospital)]).astype(np.int64)

    @cached_property
    def cell_hospital(self) -> np.ndarray:
        """0-basierter Klinikindex je Zelle."""
        return np.repeat(np.arange(self.m), self.surgeons_per_hospital).astype(np.int64)

    @cached_property
    def cell_reference(self) -> np.ndarray:
        """Index der ersten Zelle der eigenen Klinik, je Zelle."""
        return self.cell_offsets[self.cell_hospital]

    @cached_property
    def hospital_indicator(self) -> np.ndarray:
        """Dichte (q, m) 0/1-Matrix Zelle -> Klinik."""
        ind = np.zeros((self.q, self.m))
        ind[np.arange(self.q), self.cell_hospital] = 1.0
        return ind

    def cells(self) -> list[tuple[int, int]]:
        return [(z + 1, s + 1) for z, h in enumerate(self.surgeons_per_hospital) for s in range(h)]

    def cell_index(self, z: int, s: int) -> int:
        """0-basierter Zellindex fuer 1-basierte (z, s)."""
        if not 1 <= z <= self.m:
            raise ValueError(f"Ungueltige Klinik z={z} (m={self.m})")
        if not 1 <= s <= self.surgeons_per_hospital[z - 1]:
            raise ValueError(
                f"Ungueltiger Chirurg s={s} fuer Klinik z={z} "
                f"(h_z={self.surgeons_per_hospital[z - 1]})"
            )
        return int(self.cell_offsets[z - 1]) + s - 1

    def to_dict(self) -> dict:
        return {"m": self.m, "q": self.q, "surgeons_per_hospital": list(self.surgeons_per_hospital)}


@dataclass(frozen=True)
class PatientRecord:
    """Ein Patient: Outcome, Klinik, Chirurg (1-basiert) und Kovariaten."""
    y: float
    z: int
    s: int
    x: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class DataSet:
    """Validierter Patientendatensatz in Spaltenform.

    hospital und surgeon sind dichte 1-basierte Ids; label_map haelt die Originallabels.
    """
    y: np.ndarray
    hospital: np.ndarray
    surgeon: np.ndarray
    X: np.ndarray
    hierarchy: Hierarchy
    covariate_names: tuple[str, ...]
    outcome_kind: OutcomeKind
    ids: tuple[str, ...] = ()
    label_map: tuple[tuple[str, str, int, int], ...] = ()

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    @cached_property
    def cell(self) -> np.ndarray:
        """0-basierter Zellindex je Patient."""
        return self.hierarchy.cell_offsets[self.hospital - 1] + self.surgeon - 1

    @property
    def records(self) -> list[PatientRecord]:
        return [
            PatientRecord(float(y), int(z), int(s), tuple(float(v) for v in x))
            for y, z, s, x in zip(self.y, self.hospital, self.surgeon, self.X)
        ]

    def with_outcome(self, y: np.ndarray) -> "DataSet":
        """Kopie mit neuem Outcome-Vektor (gleiche Struktur, z.B. fuer Bootstrap)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError(f"Outcome-Laenge {y.shape} passt nicht zu n={self.n}")
        return DataSet(
            y=y,
            hospital=self.hospital,
            surgeon=self.surgeon,
            X=self.X,
            hierarchy=self.hierarchy,
            covariate_names=self.covariate_names,
            outcome_kind=self.outcome_kind,
            ids=self.ids,
            label_map=self.label_map,
        )

    def summary(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "outcome_kind": self.outcome_kind,
            "covariates": list(self.covariate_names),
            "hierarchy": self.hierarchy.to_dict(),
        }


@dataclass(frozen=True)
class MultinomialOptions:
    """Fit-Optionen fuer die Zuweisungsmodelle.

    tol und stall_tol gelten je Beobachtung: konvergiert bei max |Score| < tol * n;
    stagniert die Schrittweitenhalbierung, genuegt max |Score| < stall_tol * n.
    """
    tol: float = 1e-9
    stall_tol: float = 1e-6
    max_iter: int = 200
    ridge: float = 0.0
    separation_bound: float = 30.0


@dataclass(frozen=True)
class MixedOptions:
    """Fit-Optionen fuer die gemischten Outcome-Modelle.

    Randregel fuer Varianzen auf log-Skala: unter boundary_check wird das Modell ohne das Level
    gefittet und uebernommen, wenn seine Likelihood nicht schlechter ist. Ab boundary_zero und
    darunter gilt die Varianz ohne Vergleich als exakt 0.
    """
    reml: bool = False
    inner_tol: float = 1e-10
    max_inner: int = 100
    outer_tol: float = 1e-8
    max_outer: int = 500
    boundary_check: float = -3.0
    boundary_zero: float = -20.0

    def to_dict(self) -> dict:
        return {
            "reml": self.reml,
            "inner_tol": self.inner_tol,
            "max_inner": self.max_inner,
            "outer_tol": self.outer_tol,
            "max_outer": self.max_outer,
            "boundary_check": self.boundary_check,
            "boundary_zero": self.boundary_zero,
        }


@dataclass(frozen=True, eq=False)
class AssignmentParams:
    """Multinomiale Zuweisungsparameter eta.

    coef hat eine Zeile je Kategorie (Spalte 0 = Intercept psi, Rest = Steigungen phi).
    structure="joint": q Zellzeilen, Zeile 0 ist die Referenzzelle (1,1).
    structure="nested": m Klinikzeilen, danach die Zellzeilen aller Kliniken;
    Referenz ist jeweils die erste Zeile eines Blocks.
    """
    hierarchy: Hierarchy
    structure: Literal["joint", "nested"]
    coef: np.ndarray
    vcov: np.ndarray
    covariate_names: tuple[str, ...] = ()
    fit_meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return int(self.coef.shape[1]) - 1

    @property
    def psi(self) -> np.ndarray:
        return self.coef[:, 0]

    @property
    def phi(self) -> np.ndarray:
        return self.coef[:, 1:]

    @cached_property
    def free_rows(self) -> np.ndarray:
        h = self.hierarchy
        if self.structure == "joint":
            return np.arange(1, h.q)
        hospital_rows = np.arange(1, h.m)
        cell_rows = h.m + np.setdiff1d(np.arange(h.q), h.cell_offsets[:-1])
        return np.concatenate([hospital_rows, cell_rows]).astype(np.int64)

    @property
    def n_free(self) -> int:
        return int(self.free_rows.size) * (self.p + 1)

    def free_vector(self) -> np.ndarray:
        return self.coef[self.free_rows].ravel()

    def with_free_vector(self, vector: np.ndarray) -> "AssignmentParams":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_free,):
            raise ValueError(f"Parametervektor hat Laenge {vector.shape}, erwartet {self.n_free}")
        coef = self.coef.copy()
        coef[self.free_rows] = vector.reshape(-1, self.p + 1)
        return replace(self, coef=coef)

    def row_labels(self) -> list[str]:
        h = self.hierarchy
        cells = [f"cell[{z},{s}]" for z, s in h.cells()]
        if self.structure == "joint":
            return cells
        return [f"hospital[{z}]" for z in range(1, h.m + 1)] + cells

    def parameter_order(self) -> list[str]:
        names = ["intercept", *(self.covariate_names or [f"x{j + 1}" for j in range(self.p)])]
        labels = self.row_labels()
        return [f"{labels[r]}:{name}" for r in self.free_rows for name in names]

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "hierarchy": self.hierarchy.to_dict(),
            "rows": self.row_labels(),
            "psi": self.psi.tolist(),
            "phi": self.phi.tolist(),
            "parameter_order": self.parameter_order(),
            "vcov": self.vcov.ravel().tolist(),
            "fit_meta": self.fit_meta,
        }


@dataclass(frozen=True, eq=False)
class OutcomeParams:
    """Parameter theta des verschachtelten Outcome-Modells inkl. Empirical-Bayes-Effekten."""
    alpha0: float
    beta: np.ndarray
    tau2: float
    kappa2: float
    sigma2: Optional[float]
    alpha_z: np.ndarray
    gamma_zs: np.ndarray
    link: Link
    hierarchy: Hierarchy
    levels: tuple[Level, ...] = FULL_LEVELS
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tau2 < 0 or self.kappa2 < 0:
            raise ValueError(f"Negative Varianz: tau2={self.tau2}, kappa2={self.kappa2}")
        if self.link == "identity" and not (self.sigma2 is not None and self.sigma2 > 0):
            raise ValueError("Identity-Link braucht sigma2 > 0")
        if self.alpha_z.shape != (self.hierarchy.m,) or self.gamma_zs.shape != (self.hierarchy.q,):
            raise ValueError("Effektvektoren passen nicht zur Hierarchie")

    @property
    def p(self) -> int:
        return int(self.beta.shape[0])

    def cell_effects(self) -> np.ndarray:
        """alpha_z + gamma_zs je Zelle."""
        return self.alpha_z[self.hierarchy.cell_hospital] + self.gamma_zs

    def with_effects(
        self,
        alpha_z: np.ndarray | None = None,
        gamma_zs: np.ndarray | None = None,
    ) -> "OutcomeParams":
        return replace(
            self,
            alpha_z=self.alpha_z if alpha_z is None else np.asarray(alpha_z, dtype=float),
            gamma_zs=self.gamma_zs if gamma_zs is None else np.asarray(gamma_zs, dtype=float),
        )

    def to_dict(self) -> dict:
        cells = self.hierarchy.cells()
        return {
            "link": self.link,
            "alpha0": self.alpha0,
            "beta": self.beta.tolist(),
            "tau2": self.tau2,
            "kappa2": self.kappa2,
            "sigma2": self.sigma2,
            "levels": list(self.levels),
            "hospital_effects": [
                {"hospital": z + 1, "alpha": float(a)} for z, a in enumerate(self.alpha_z)
            ],
            "surgeon_effects": [
                {"hospital": z, "surgeon": s, "gamma": float(g)}
                for (z, s), g in zip(cells, self.gamma_zs)
            ],
            "fit_meta": self.fit_meta,
        }


@dataclass(frozen=True, eq=False)
class MarginalModels:
    """Bedingte Mittelwertmodelle E[Y|X], E[Y|Z,X], E[Y|S,Z,X]."""
    model_x: OutcomeParams
    model_zx: OutcomeParams
    model_szx: OutcomeParams

    @property
    def link(self) -> Link:
        return self.model_szx.link


@dataclass(frozen=True)
class VarianceComponents:
    """Varianzkomponenten (omega1..omega4) mit Herkunft."""
    omega1: float
    omega2: float
    omega3: float
    omega4: float
    total: float
    method: Method
    residual_mode: ResidualMode
    flags: tuple[str, ...] = ()

    def as_array(self) -> np.ndarray:
        return np.array([self.omega1, self.omega2, self.omega3, self.omega4])

    def shares(self) -> dict[str, float]:
        total = self.total
        return {
            name: (float(value) / total if total else float("nan"))
            for name, value in zip(COMPONENT_NAMES, self.as_array())
        }

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "residual_mode": self.residual_mode,
            "omega1": self.omega1,
            "omega2": self.omega2,
            "omega3": self.omega3,
            "omega4": self.omega4,
            "total": self.total,
            "shares": self.shares(),
            "flags": list(self.flags),
        }


@dataclass(frozen=True, eq=False)
class TargetAssignment:
    """Hypothetischer Zuweisungsmechanismus.

    cell_probabilities(X) liefert eine (n, q) Matrix P~(Z=a, S=b | x) = e~(a;x) g~(b;a,x).
    """
    kind: TargetKind
    hierarchy: Hierarchy
    cell_probabilities: Callable[[np.ndarray], np.ndarray]
    description: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "description": self.description}


@dataclass
class ComponentDraws:
    """R Posterior-Ziehungen der vier Komponenten."""
    draws: np.ndarray
    seed: int
    replicate_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negative_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    failed_replicates: list[int] = field(default_factory=list)

    @property
    def R(self) -> int:
        return int(self.draws.shape[0])


@dataclass
class ComponentInterval:
    point: float
    lower: float
    upper: float
    mean: float
    sd: float
    median: float

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "mean": self.mean,
            "sd": self.sd,
            "median": self.median,
        }


@dataclass
class ComponentIntervals:
    """Gleichschwaenzige Quantilsintervalle je Komponente."""
    level: float
    components: dict[str, ComponentInterval]

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "components": {name: iv.to_dict() for name, iv in self.components.items()},
        }


@dataclass(frozen=True)
class SimConfig:
    """Simulationsdesign der Replikationsstudie."""
    n: int
    m: int
    q: int
    seed: int = 0
    outcome_kind: OutcomeKind = "binary"
    effect_sd_hospital: float = float(np.sqrt(2.0))
    effect_sd_surgeon: float = float(np.sqrt(2.0))
    assign_intercept_sd: float = 0.5
    assign_coef_sd: float = float(np.sqrt(0.5))
    beta: tuple[float, float] = (1.0, 2.0)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "q": self.q,
            "seed": self.seed,
            "outcome_kind": self.outcome_kind,
            "effect_sd_hospital": self.effect_sd_hospital,
            "effect_sd_surgeon": self.effect_sd_surgeon,
            "assign_intercept_sd": self.assign_intercept_sd,
            "assign_coef_sd": self.assign_coef_sd,
            "beta": list(self.beta),
        }


@dataclass(frozen=True, eq=False)
class GeneratingParams:
    """Gezogene wahre Parameter einer simulierten Population."""
    hierarchy: Hierarchy
    alpha: np.ndarray
    gamma: np.ndarray
    eta: AssignmentParams
    beta: np.ndarray
    outcome_kind: OutcomeKind

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "assignment_coef": self.eta.coef.tolist(),
            "outcome_kind": self.outcome_kind,
            "hierarchy": self.hierarchy.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class GeneratedPopulation:
    """Gezogener Datensatz mit den erzeugenden Parametern.

    empty_cells: (Klinik, Chirurg) der Parameter-Hierarchie (1-basiert) ohne Patienten. Ist die
    Liste nicht leer, hat dataset eine kleinere Hierarchie als params.
    """
    dataset: DataSet
    params: GeneratingParams
    empty_cells: tuple[tuple[int, int], ...] = ()

    @property
    def shrunk(self) -> bool:
        return bool(self.empty_cells)


@dataclass(frozen=True)
class TruthComponents:
    """Wahre Komponenten per Monte Carlo mit Standardfehlern."""
    omega: tuple[float, float, float, float]
    se: tuple[float, float, float, float]
    n_mc: int

    def to_dict(self) -> dict:
        return {
            "n_mc": self.n_mc,
            **{name: value for name, value in zip(COMPONENT_NAMES, self.omega)},
            "se": dict(zip(COMPONENT_NAMES, self.se)),
        }


@dataclass(frozen=True, eq=False)
class DiscreteInstance:
    """Vollstaendig diskrete Instanz fuer die Brute-Force-Auswertung.

    Tabellen haben Form (K, q): K Stuetzpunkte von X, q Zellen.
    """
    hierarchy: Hierarchy
    x_support: np.ndarray
    x_prob: np.ndarray
    cell_mu: np.ndarray
    cell_assign: np.ndarray
    cell_condvar: np.ndarray
    name: str = ""
    outcome_kind: OutcomeKind = "binary"


class Timer:
    """Laufzeit eines Fit- oder Simulationsblocks; elapsed ist auch innerhalb des Blocks lesbar.

    Mit label wird die Dauer beim Verlassen auf DEBUG geloggt.
    """

    def __init__(self, label: str | None = None):
        self.label = label
        self._start: float | None = None
        self._stop: float | None = None

    @property
    def elapsed(self) -> float:
        if self._start is None:
            return 0.0
        end = self._stop if self._stop is not None else time.perf_counter()
        return end - self._start

    def __enter__(self) -> Timer:
        self._start, self._stop = time.perf_counter(), None
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self._stop = time.perf_counter()
        if self.label:
            logger.debug(f"{self.label}: {self.elapsed:.3f}s")
