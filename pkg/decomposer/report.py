"""Lesbare Berichte (Markdown-Tabellen mit fester Spaltenbreite)."""

from __future__ import annotations

from typing import Iterable

from .models import COMPONENT_NAMES, ComponentIntervals, VarianceComponents

COLUMN_WIDTH = 12


def _cell(value) -> str:
    if isinstance(value, float):
        return "nan" if value != value else f"{value:.6f}"
    return str(value)


def _table(header: list[str], rows: list[list]) -> list[str]:
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [
        max([COLUMN_WIDTH, len(h)] + [len(row[j]) for row in cells])
        for j, h in enumerate(header)
    ]
    lines = [
        "| " + " | ".join(h.rjust(w) for h, w in zip(header, widths)) + " |",
        "|" + "|".join("-" * (w + 2) for w in widths) + "|",
    ]
    for row in cells:
        lines.append("| " + " | ".join(v.rjust(w) for v, w in zip(row, widths)) + " |")
    return lines


def format_components_report(
    results: Iterable[VarianceComponents],
    intervals: ComponentIntervals | None = None,
    title: str = "Varianzzerlegung",
) -> str:
    """Eine Zeile je Methode: omega1..omega4, Summe, Anteile; optional Intervalle."""
    results = list(results)
    lines = [f"# {title}", "", "## Komponenten", ""]
    lines += _table(
        ["Methode", *COMPONENT_NAMES, "Summe"],
        [[vc.method, *(float(v) for v in vc.as_array()), float(vc.total)] for vc in results],
    )

    lines += ["", "## Anteile an der Summe", ""]
    lines += _table(
        ["Methode", *COMPONENT_NAMES],
        [[vc.method, *(vc.shares()[name] for name in COMPONENT_NAMES)] for vc in results],
    )

    flagged = [vc for vc in results if vc.flags]
    if flagged:
        lines += ["", "## Hinweise", ""]
        for vc in flagged:
            lines.append(f"- **{vc.method}**: {', '.join(vc.flags)}")

    if intervals is not None:
        lines += ["", f"## Intervalle ({intervals.level:.0%})", ""]
        lines += _table(
            ["Komponente", "Punkt", "unten", "oben", "SD"],
            [
                [name, iv.point, iv.lower, iv.upper, iv.sd]
                for name, iv in intervals.components.items()
            ],
        )
    return "\n".join(lines) + "\n"


def format_replication_report(summaries: dict[str, dict]) -> str:
    """Je Szenario: Mittel, SD, Quantile und Bias je Methode und Komponente."""
    lines = ["# Replikationsstudie", ""]
    for scenario, summary in summaries.items():
        lines += [f"## {scenario}", ""]
        rows = []
        for method, components in summary["methods"].items():
            for name, stats in components.items():
                rows.append([
                    method, name, stats["mean"], stats["sd"],
                    stats["q025"], stats["q975"], stats["truth"], stats["bias"],
                ])
        lines += _table(["Methode", "Komponente", "Mittel", "SD", "q2.5", "q97.5", "Wahrheit", "Bias"], rows)
        comparison = summary.get("three_vs_four_way")
        if comparison:
            lines.append("")
            lines.append(
                f"- Dreifach-Residuum {comparison['three_way_residual_mean']:.6f} vs. "
                f"omega3 + omega4 {comparison['omega3_plus_omega4_mean']:.6f} "
                f"(max. Abweichung {comparison['max_abs_diff']:.2e})"
            )
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
