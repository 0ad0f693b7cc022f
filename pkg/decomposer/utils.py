"""Gemeinsame Utilities: JSON-Ausgabe, Env-Werte, Zufallsstroeme, Chunking."""

from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

# Stream-Tags fuer default_rng([seed, tag, replicate]); feste Werte halten Replikate
# unabhaengig von der Worker-Anzahl reproduzierbar.
STREAM_THETA = 1
STREAM_ETA = 2
STREAM_SIMULATION = 3
STREAM_TRUTH = 4
STREAM_PARAMS = 5

DEFAULT_CHUNK_SIZE = 2048


def spawn_rng(seed: int, *tags: int) -> np.random.Generator:
    """Generator fuer einen benannten Teilstrom (seed, tag, index...)."""
    return np.random.default_rng([int(seed), *(int(t) for t in tags)])


def iter_chunks(n: int, size: int = DEFAULT_CHUNK_SIZE) -> Iterator[slice]:
    for start in range(0, n, max(1, size)):
        yield slice(start, min(n, start + size))


def chunk_size_for(q: int, budget: int = 4_000_000) -> int:
    """Zeilen pro Chunk, so dass (chunk, q)-Matrizen im Budget bleiben."""
    return max(1, min(DEFAULT_CHUNK_SIZE * 8, budget // max(1, q)))


def group_indicator(index: np.ndarray, size: int) -> sparse.csr_matrix:
    """Sparse (size, n) 0/1-Matrix fuer Gruppensummen ueber Datensaetze."""
    n = index.shape[0]
    return sparse.csr_matrix(
        (np.ones(n), (index, np.arange(n))),
        shape=(size, n),
    )


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value) or math.isinf(value):
            return None
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def to_json(payload: Any) -> str:
    """JSON mit kuerzester exakter Float-Darstellung (repr), NaN -> null."""
    return json.dumps(_jsonable(payload), ensure_ascii=False, indent=2) + "\n"


def write_json(payload: Any, output_path: Path) -> Path:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(to_json(payload), encoding="utf-8")
    logger.info(f"Geschrieben: {output_path}")
    return output_path


def resolve_env_int(name: str, default: int | None, minimum: int | None = None) -> int | None:
    """Liest eine Ganzzahl aus der Umgebung; ungueltige Werte -> Warnung und Default."""
    raw_value = os.environ.get(name, "").strip()
    if not raw_value:
        return default
    try:
        value = int(raw_value)
    except ValueError:
        logger.warning(f"Ungueltiger {name} Wert {raw_value!r}, nutze {default}")
        return default
    if minimum is not None and value < minimum:
        logger.warning(f"{name}={value} unter Minimum {minimum}, nutze {default}")
        return default
    return value


def resolve_seed(default: int = 0) -> int:
    return resolve_env_int("VARDECOMP_SEED", default, minimum=0)


def resolve_threads(default: int | None = None) -> int:
    """Worker-Anzahl: VARDECOMP_THREADS, sonst alle Kerne."""
    fallback = default if default is not None else (os.cpu_count() or 1)
    return resolve_env_int("VARDECOMP_THREADS", fallback, minimum=1)


ENV_PREFIX = "VARDECOMP_"


def _env_value(raw_value: str) -> str:
    value = raw_value.strip()
    if len(value) >= 2 and value[0] in "'\"" and value[-1] == value[0]:
        return value[1:-1]
    return value.split(" #", 1)[0].rstrip()


def read_env_file(path: Path, prefix: str = ENV_PREFIX) -> dict[str, str]:
    """KEY=VALUE-Zeilen einer .env mit Schluessel-Praefix prefix.

    Werte in Quotes werden entquotet; ohne Quotes endet der Wert vor " #".
    Fremde Schluessel und kaputte Zeilen werden uebersprungen.
    """
    values: dict[str, str] = {}
    for number, raw_line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw_value = line.removeprefix("export ").partition("=")
        key = key.strip()
        if not sep or not key:
            logger.warning(f"{path}:{number}: keine KEY=VALUE-Zeile, ignoriert")
            continue
        if not key.startswith(prefix):
            logger.debug(f"{path}:{number}: {key} ohne Praefix {prefix}, ignoriert")
            continue
        values[key] = _env_value(raw_value)
    return values


def apply_env_file(path: Path, prefix: str = ENV_PREFIX) -> list[str]:
    """Uebernimmt Werte aus der Datei, die noch nicht gesetzt sind; gibt die neuen Schluessel zurueck."""
    applied = []
    for key, value in read_env_file(path, prefix).items():
        if key in os.environ:
            continue
        os.environ[key] = value
        applied.append(key)
    return applied


def autoload_env(directories: Iterable[Path]) -> Path | None:
    """Wendet die erste vorhandene .env aus directories an (Projektordner vor Skriptordner)."""
    for directory in dict.fromkeys(Path(d).resolve() for d in directories):
        path = directory / ".env"
        if path.is_file():
            applied = apply_env_file(path)
            logger.debug(f".env geladen: {path} (neu: {', '.join(applied) or '-'})")
            return path
    return None
