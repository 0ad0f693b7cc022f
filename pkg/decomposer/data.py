"""Datenmodell-Ein-/Ausgabe: CSV laden, validieren, Positivitaets-Diagnostik."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .models import DataSet, Hierarchy, OutcomeKind

logger = logging.getLogger(__name__)

DEFAULT_MIN_CELL_COUNT = 2


@dataclass(frozen=True)
class ColumnSchema:
    """Spaltenzuordnung der Eingabe-CSV. covariates=None: alle uebrigen Spalten."""
    id: str = "id"
    hospital: str = "hospital"
    surgeon: str = "surgeon"
    y: str = "y"
    covariates: Optional[tuple[str, ...]] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "hospital": self.hospital,
            "surgeon": self.surgeon,
            "y": self.y,
            "covariates": list(self.covariates) if self.covariates is not None else None,
        }


def _label_key(label: str) -> tuple:
    """Numerische Labels numerisch sortieren, sonst lexikographisch."""
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def _dense_ids(labels: Sequence[str], what: str, relabel: bool) -> tuple[np.ndarray, list[str]]:
    unique = sorted(set(labels), key=_label_key)
    if not relabel:
        expected = [str(i) for i in range(1, len(unique) + 1)]
        if unique != expected:
            raise DataError(
                f"{what}-Ids sind keine zusammenhaengenden positiven Ganzzahlen 1..{len(unique)}: "
                f"{unique[:10]}"
            )
    mapping = {label: i + 1 for i, label in enumerate(unique)}
    return np.array([mapping[label] for label in labels], dtype=np.int64), unique


def dataset_from_arrays(
    y: np.ndarray,
    hospital_labels: Sequence,
    surgeon_labels: Sequence,
    X: np.ndarray,
    covariate_names: Sequence[str] | None = None,
    outcome_kind: OutcomeKind | None = None,
    ids: Sequence[str] | None = None,
    relabel: bool = True,
) -> DataSet:
    """Baut ein validiertes DataSet; Hierarchie aus den beobachteten (z, s)-Paaren."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = y.shape[0]
    if n < 1:
        raise DataError("Datensatz ist leer")
    if X.shape[0] != n or len(hospital_labels) != n or len(surgeon_labels) != n:
        raise DataError("Spaltenlaengen sind inkonsistent")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise DataError("Fehlende oder nicht-endliche Werte in y oder X")

    is_binary = bool(np.all((y == 0.0) | (y == 1.0)))
    if outcome_kind is None:
        outcome_kind = "binary" if is_binary else "continuous"
    elif outcome_kind == "binary" and not is_binary:
        bad = y[(y != 0.0) & (y != 1.0)][:5]
        raise DataError(f"Outcome ausserhalb des Wertebereichs {{0,1}} (outcome out of range): {bad.tolist()}")

    hospital_str = [str(v).strip() for v in hospital_labels]
    surgeon_str = [str(v).strip() for v in surgeon_labels]
    z, hospital_unique = _dense_ids(hospital_str, "Klinik", relabel)

    s = np.zeros(n, dtype=np.int64)
    counts = []
    label_map = []
    for zi, hospital_label in enumerate(hospital_unique, start=1):
        rows = np.flatnonzero(z == zi)
        ids_z, surgeon_unique = _dense_ids(
            [surgeon_str[i] for i in rows], f"Chirurgen (Klinik {hospital_label})", relabel
        )
        s[rows] = ids_z
        counts.append(len(surgeon_unique))
        label_map.extend(
            (hospital_label, surgeon_label, zi, si)
            for si, surgeon_label in enumerate(surgeon_unique, start=1)
        )

    names = tuple(covariate_names) if covariate_names is not None else tuple(
        f"x{j + 1}" for j in range(X.shape[1])
    )
    if len(names) != X.shape[1]:
        raise DataError(f"{len(names)} Kovariatennamen fuer {X.shape[1]} Spalten")

    return DataSet(
        y=y,
        hospital=z,
        surgeon=s,
        X=X,
        hierarchy=Hierarchy(tuple(counts)),
        covariate_names=names,
        outcome_kind=outcome_kind,
        ids=tuple(str(i) for i in ids) if ids is not None else tuple(str(i + 1) for i in range(n)),
        label_map=tuple(label_map),
    )


def load_dataset(
    path: Path,
    schema: ColumnSchema | None = None,
    outcome_kind: OutcomeKind | None = None,
    relabel: bool = True,
) -> DataSet:
    """Laedt eine CSV (`id,hospital,surgeon,y,x1,...,xp`) als validiertes DataSet.

    Args:
        path: Pfad zur CSV-Datei (Komma, UTF-8, Dezimalpunkt)
        schema: Spaltenzuordnung (Default: Standard-Header)
        outcome_kind: "binary"/"continuous" erzwingen; None = aus den Daten ableiten
        relabel: Originallabels dicht auf 1..m / 1..h_z abbilden; False verlangt bereits
            zusammenhaengende Ids

    Returns:
        DataSet mit aus den Daten abgeleiteter Hierarchie
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Datei nicht gefunden: {path}")
    schema = schema or ColumnSchema()

    try:
        frame = pd.read_csv(path, sep=",", encoding="utf-8", dtype=str, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"CSV konnte nicht gelesen werden ({path.name}): {exc}") from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    for column in (schema.hospital, schema.surgeon, schema.y):
        if column not in frame.columns:
            raise DataError(f"Unbekannte Spalte: {column!r} (vorhanden: {list(frame.columns)})")

    reserved = {schema.id, schema.hospital, schema.surgeon, schema.y}
    if schema.covariates is None:
        covariates = [c for c in frame.columns if c not in reserved]
    else:
        covariates = list(schema.covariates)
        unknown = [c for c in covariates if c not in frame.columns]
        if unknown:
            raise DataError(f"Unbekannte Spalte: {unknown} (vorhanden: {list(frame.columns)})")

    used = [schema.hospital, schema.surgeon, schema.y, *covariates]
    missing = frame[used].isna().any()
    if missing.any():
        raise DataError(f"Fehlende Werte in Spalten: {list(missing[missing].index)}")

    try:
        y = frame[schema.y].astype(float).to_numpy()
        X = (
            frame[covariates].astype(float).to_numpy()
            if covariates
            else np.zeros((len(frame), 0))
        )
    except ValueError as exc:
        raise DataError(f"Nicht-numerischer Wert in y oder Kovariaten: {exc}") from exc

    ids = frame[schema.id].tolist() if schema.id in frame.columns else None
    dataset = dataset_from_arrays(
        y=y,
        hospital_labels=frame[schema.hospital].tolist(),
        surgeon_labels=frame[schema.surgeon].tolist(),
        X=X,
        covariate_names=covariates,
        outcome_kind=outcome_kind,
        ids=ids,
        relabel=relabel,
    )
    h = dataset.hierarchy
    logger.info(
        f"Geladen: {path.name} (n={dataset.n}, m={h.m}, q={h.q}, p={dataset.p}, "
        f"{dataset.outcome_kind})"
    )
    return dataset


def write_dataset(d: DataSet, output_path: Path) -> Path:
    """Schreibt ein DataSet im Standard-Header mit dichten Ids (verlustfreie Floats)."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({
        "id": list(d.ids),
        "hospital": d.hospital,
        "surgeon": d.surgeon,
        "y": d.y.astype(np.int64) if d.outcome_kind == "binary" else d.y,
    })
    for j, name in enumerate(d.covariate_names):
        frame[name] = d.X[:, j]
    frame.to_csv(output_path, index=False, lineterminator="\n")
    logger.info(f"Geschrieben: {output_path}")
    return output_path


def empirical_variance(d: DataSet) -> float:
    """Stichprobenvarianz von y mit Divisor n-1."""
    if d.n < 2:
        raise DataError(f"Empirische Varianz braucht n >= 2 (n={d.n})")
    return float(np.var(d.y, ddof=1))


def _binary_columns(X: np.ndarray) -> list[tuple[int, np.ndarray]]:
    columns = []
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        if values.size == 2:
            columns.append((j, values))
    return columns


def positivity_report(d: DataSet, min_count: int = DEFAULT_MIN_CELL_COUNT) -> pd.DataFrame:
    """Fallzahlen je Zelle und je Stratum zweiwertiger Kovariaten.

    Eine Zelle wird markiert, wenn sie weniger als min_count Patienten hat oder in einem
    beobachteten Kovariatenstratum keinen Patienten hat. Keine Exception, nur Warnung.
    """
    h = d.hierarchy
    cells = h.cells()
    counts = np.bincount(d.cell, minlength=h.q)
    frame = pd.DataFrame({
        "hospital": [z for z, _ in cells],
        "surgeon": [s for _, s in cells],
        "count": counts,
    })
    flags: list[list[str]] = [[] for _ in range(h.q)]
    for c in np.flatnonzero(counts < min_count):
        flags[c].append("low_volume")

    for j, values in _binary_columns(d.X):
        name = d.covariate_names[j]
        for value in values:
            label = f"{name}={value:g}"
            stratum = np.bincount(d.cell[d.X[:, j] == value], minlength=h.q)
            frame[f"n[{label}]"] = stratum
            for c in np.flatnonzero(stratum == 0):
                flags[c].append(label)

    frame["flags"] = [";".join(f) for f in flags]
    flagged = int(sum(1 for f in flags if f))
    if flagged:
        logger.warning(f"Positivitaet: {flagged} von {h.q} Zellen markiert")
    return frame


def write_positivity_report(report: pd.DataFrame, output_path: Path) -> Path:
    output_path = Path(output_path)
    report[["hospital", "surgeon", "count", "flags"]].to_csv(
        output_path, index=False, lineterminator="\n"
    )
    logger.info(f"Geschrieben: {output_path}")
    return output_path


def write_label_map(d: DataSet, output_path: Path) -> Path:
    """Zuordnung Originallabels -> dichte Ids."""
    output_path = Path(output_path)
    frame = pd.DataFrame(
        list(d.label_map),
        columns=["hospital_label", "surgeon_label", "hospital", "surgeon"],
    )
    frame.to_csv(output_path, index=False, lineterminator="\n")
    logger.info(f"Geschrieben: {output_path}")
    return output_path
