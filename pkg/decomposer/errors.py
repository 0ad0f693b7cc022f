"""Fehlerklassen mit CLI-Exit-Codes."""

from __future__ import annotations


class VarDecompError(Exception):
    """Basisklasse aller fachlichen Fehler."""
    exit_code = 1


class ConfigError(VarDecompError, ValueError):
    """Ungueltige Konfiguration oder Aufrufparameter."""
    exit_code = 2


class DataError(VarDecompError, ValueError):
    """Daten passen nicht zum erwarteten Schema oder zur Hierarchie."""
    exit_code = 3


class ConvergenceError(VarDecompError, RuntimeError):
    """Optimierer hat nicht konvergiert oder zu viele Replikate sind gescheitert."""
    exit_code = 4


class SeparationError(ConvergenceError):
    """Vollstaendige Separation im Multinomialmodell (Likelihood unbeschraenkt)."""

    def __init__(self, message: str, cell: str = "", covariate: str = ""):
        super().__init__(message)
        self.cell = cell
        self.covariate = covariate
