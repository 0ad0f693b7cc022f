"""SVG-Grafiken der Replikationsstudie (Balken, Dichten, Dichten ueber n, Vergleich 3- vs 4-fach).

Feste viewBox 800x500, Zahlenwerte als Text und data-Attribute eingebettet.
"""

from __future__ import annotations

import logging
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

from .models import COMPONENT_NAMES

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 50, 80
FOUR_WAY_METHODS = ("model_based", "semi_parametric")
METHOD_COLORS = {"model_based": "#9e9e9e", "semi_parametric": "#d9c27a", "three_way": "#8fb3d9"}
COMPONENT_COLORS = dict(zip(COMPONENT_NAMES, ("#1b9e77", "#d95f02", "#7570b3", "#666666")))
SCENARIO_COLORS = ("#1f4fbf", "#d95f02", "#1b9e77", "#e7298a")
COMPONENT_LABELS = {
    "omega1": "Fallmix",
    "omega2": "Klinik",
    "omega3": "Chirurg",
    "omega4": "Residuum",
}


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def _document(title: str, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
        f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">'
    )
    lines = [
        head,
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="28" text-anchor="middle" font-size="16">{escape(title)}</text>',
        *body,
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


class _Axis:
    """Lineare Abbildung Datenwert -> Pixel."""

    def __init__(self, lower: float, upper: float, pixel_lower: float, pixel_upper: float):
        if upper <= lower:
            upper = lower + 1.0
        self.lower, self.upper = lower, upper
        self.pixel_lower, self.pixel_upper = pixel_lower, pixel_upper

    def __call__(self, value: float) -> float:
        share = (value - self.lower) / (self.upper - self.lower)
        return round(self.pixel_lower + share * (self.pixel_upper - self.pixel_lower), 2)

    def ticks(self, count: int = 5) -> np.ndarray:
        return np.linspace(self.lower, self.upper, count + 1)


def _y_axis(axis: _Axis) -> list[str]:
    body = [f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{HEIGHT - BOTTOM}" stroke="black"/>']
    for tick in axis.ticks():
        y = axis(tick)
        body.append(f'<line x1="{LEFT - 5}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/>')
        body.append(f'<text x="{LEFT - 8}" y="{y + 4}" text-anchor="end">{_fmt(tick)}</text>')
    body.append(f'<line x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{WIDTH - RIGHT}" '
                f'y2="{HEIGHT - BOTTOM}" stroke="black"/>')
    return body


def _legend(entries: list[tuple[str, str]]) -> list[str]:
    body = []
    for i, (label, color) in enumerate(entries):
        x = LEFT + 10 + i * 170
        y = HEIGHT - 25
        body.append(f'<rect x="{x}" y="{y - 10}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{x + 18}" y="{y}">{escape(label)}</text>')
    return body


def bar_chart_svg(summary: dict, title: str) -> str:
    """Balken = Stichprobenmittel, schwarz = 2.5/97.5 %-Quantile, blau = MC-KI, rot = Wahrheit."""
    methods = [m for m in FOUR_WAY_METHODS if m in summary["methods"]]
    truth = summary["truth"]
    upper = max(
        [truth[c] for c in COMPONENT_NAMES]
        + [summary["methods"][m][c]["q975"] for m in methods for c in COMPONENT_NAMES
           if c in summary["methods"][m]]
        + [0.0]
    )
    axis = _Axis(0.0, upper * 1.1 if upper > 0 else 1.0, HEIGHT - BOTTOM, TOP)
    body = _y_axis(axis)

    group_width = (WIDTH - LEFT - RIGHT) / len(COMPONENT_NAMES)
    bar_width = group_width * 0.7 / max(1, len(methods))
    for g, component in enumerate(COMPONENT_NAMES):
        group_left = LEFT + g * group_width + group_width * 0.15
        center = LEFT + (g + 0.5) * group_width
        for i, method in enumerate(methods):
            stats = summary["methods"][method].get(component)
            if stats is None:
                continue
            x = round(group_left + i * bar_width, 2)
            mid = round(x + bar_width / 2, 2)
            top = axis(max(stats["mean"], 0.0))
            body.append(
                f'<rect class="bar" data-method="{method}" data-component="{component}" '
                f'data-mean="{_fmt(stats["mean"])}" x="{x}" y="{top}" width="{round(bar_width * 0.9, 2)}" '
                f'height="{round(axis(0.0) - top, 2)}" fill="{METHOD_COLORS[method]}"/>'
            )
            body.append(
                f'<line class="quantiles" x1="{mid - 3}" y1="{axis(stats["q025"])}" x2="{mid - 3}" '
                f'y2="{axis(stats["q975"])}" stroke="black" stroke-width="2"/>'
            )
            low, high = stats["mc_ci"]
            body.append(
                f'<line class="mc-ci" x1="{mid + 3}" y1="{axis(low)}" x2="{mid + 3}" '
                f'y2="{axis(high)}" stroke="#1f4fbf" stroke-width="4"/>'
            )
            body.append(
                f'<text x="{mid}" y="{HEIGHT - BOTTOM + 30}" text-anchor="middle" font-size="10">'
                f'{_fmt(stats["mean"])}</text>'
            )
        value = truth[component]
        body.append(
            f'<circle class="truth" data-component="{component}" data-value="{_fmt(value)}" '
            f'cx="{round(center, 2)}" cy="{axis(value)}" r="5" fill="red"/>'
        )
        body.append(
            f'<text class="truth-label" x="{round(center + 8, 2)}" y="{axis(value) - 6}" fill="red">'
            f'{_fmt(value)}</text>'
        )
        body.append(
            f'<text x="{round(center, 2)}" y="{HEIGHT - BOTTOM + 15}" text-anchor="middle">'
            f'{COMPONENT_LABELS[component]}</text>'
        )
    body += _legend([(m, METHOD_COLORS[m]) for m in methods] + [("Wahrheit", "red")])
    return _document(title, body)


def _value_axis(values: list[np.ndarray]) -> _Axis:
    everything = np.concatenate(values)
    span = float(everything.max() - everything.min()) or 1.0
    return _Axis(float(everything.min()) - 0.05 * span, float(everything.max()) + 0.05 * span,
                 LEFT, WIDTH - RIGHT)


def _kde_curves(samples: dict[str, np.ndarray], grid: np.ndarray) -> dict[str, np.ndarray]:
    """Kerndichten; Stichproben ohne Streuung bekommen keine Kurve."""
    return {
        key: gaussian_kde(sample)(grid)
        for key, sample in samples.items()
        if sample.size > 1 and np.ptp(sample) > 0
    }


def _x_axis(axis: _Axis) -> list[str]:
    body = [f'<line x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{WIDTH - RIGHT}" '
            f'y2="{HEIGHT - BOTTOM}" stroke="black"/>']
    for tick in axis.ticks():
        body.append(f'<text x="{axis(tick)}" y="{HEIGHT - BOTTOM + 15}" text-anchor="middle">{_fmt(tick)}</text>')
    return body


def _density_marks(key: str, attribute: str, sample: np.ndarray, curve: np.ndarray | None,
                   grid: np.ndarray, x_axis: _Axis, y_axis: _Axis, color: str, dash: str = "") -> list[str]:
    style = f' stroke-dasharray="{dash}"' if dash else ""
    if curve is not None:
        points = " ".join(f"{x_axis(x)},{y_axis(y)}" for x, y in zip(grid, curve))
        return [
            f'<polyline class="density" {attribute}="{escape(key)}" points="{points}" '
            f'fill="none" stroke="{color}" stroke-width="2"{style}/>'
        ]
    if sample.size:
        x = x_axis(float(sample[0]))
        return [f'<line class="density" {attribute}="{escape(key)}" x1="{x}" y1="{TOP}" x2="{x}" '
                f'y2="{HEIGHT - BOTTOM}" stroke="{color}" stroke-width="2"{style}/>']
    return []


def density_svg(table: pd.DataFrame, truth: dict, title: str, method: str = "model_based") -> str:
    """Kerndichteschaetzer der Stichprobenverteilung je Komponente, Wahrheit gestrichelt."""
    subset = table[table["method"] == method]
    values = {c: subset.loc[subset["component"] == c, "estimate"].to_numpy() for c in COMPONENT_NAMES}
    x_axis = _value_axis([v for v in values.values() if v.size] + [np.array([truth[c] for c in COMPONENT_NAMES])])
    grid = np.linspace(x_axis.lower, x_axis.upper, 200)
    curves = _kde_curves(values, grid)
    peak = max([float(c.max()) for c in curves.values()] + [1e-12])
    y_axis = _Axis(0.0, peak * 1.1, HEIGHT - BOTTOM, TOP)

    body = _x_axis(x_axis)
    for component in COMPONENT_NAMES:
        color = COMPONENT_COLORS[component]
        body += _density_marks(component, "data-component", values[component], curves.get(component),
                               grid, x_axis, y_axis, color)
        x = x_axis(truth[component])
        body.append(
            f'<line class="truth" data-component="{component}" data-value="{_fmt(truth[component])}" '
            f'x1="{x}" y1="{TOP}" x2="{x}" y2="{HEIGHT - BOTTOM}" stroke="{color}" '
            f'stroke-dasharray="6,4"/>'
        )
    body += _legend([(COMPONENT_LABELS[c], COMPONENT_COLORS[c]) for c in COMPONENT_NAMES])
    return _document(title, body)


def density_overlay_svg(samples: dict[str, np.ndarray], truth: float | None, title: str) -> str:
    """Dichten einer Komponente fuer mehrere Szenarien uebereinander, etwa n=2000 gegen n=5000.

    samples: Legendenlabel -> Schaetzungen je Replikat; truth wird schwarz gestrichelt markiert.
    """
    arrays = {label: np.asarray(v, dtype=float) for label, v in samples.items()}
    if not any(a.size for a in arrays.values()):
        raise ValueError("Keine Schaetzungen fuer die Dichte-Ueberlagerung")
    if len(arrays) > len(SCENARIO_COLORS):
        raise ValueError(f"Hoechstens {len(SCENARIO_COLORS)} Szenarien je Ueberlagerung: {len(arrays)}")
    reference = [np.array([truth])] if truth is not None else []
    x_axis = _value_axis([a for a in arrays.values() if a.size] + reference)
    grid = np.linspace(x_axis.lower, x_axis.upper, 200)
    curves = _kde_curves(arrays, grid)
    peak = max([float(c.max()) for c in curves.values()] + [1e-12])
    y_axis = _Axis(0.0, peak * 1.1, HEIGHT - BOTTOM, TOP)

    body = _x_axis(x_axis)
    colors = dict(zip(arrays, SCENARIO_COLORS))
    for label, sample in arrays.items():
        body += _density_marks(label, "data-scenario", sample, curves.get(label), grid, x_axis, y_axis,
                               colors[label])
    if truth is not None:
        x = x_axis(truth)
        body.append(
            f'<line class="truth" data-value="{_fmt(truth)}" x1="{x}" y1="{TOP}" x2="{x}" '
            f'y2="{HEIGHT - BOTTOM}" stroke="black" stroke-dasharray="6,4"/>'
        )
    body += _legend([(label, colors[label]) for label in arrays])
    return _document(title, body)


def comparison_svg(rows: list[tuple[str, float, float]], title: str) -> str:
    """Je Szenario: Residuum der Dreifach-Zerlegung neben omega3 + omega4 der Vierfach-Zerlegung."""
    upper = max([max(a, b) for _, a, b in rows] + [0.0])
    axis = _Axis(0.0, upper * 1.1 if upper > 0 else 1.0, HEIGHT - BOTTOM, TOP)
    body = _y_axis(axis)
    group_width = (WIDTH - LEFT - RIGHT) / max(1, len(rows))
    bar_width = group_width * 0.35
    for g, (scenario, three_way, four_way) in enumerate(rows):
        left = LEFT + g * group_width + group_width * 0.15
        for i, (label, value, color) in enumerate((
            ("three_way_residual", three_way, METHOD_COLORS["three_way"]),
            ("omega3_plus_omega4", four_way, METHOD_COLORS["model_based"]),
        )):
            x = round(left + i * bar_width, 2)
            top = axis(max(value, 0.0))
            body.append(
                f'<rect class="bar" data-scenario="{escape(scenario)}" data-series="{label}" '
                f'data-value="{_fmt(value)}" x="{x}" y="{top}" width="{round(bar_width * 0.9, 2)}" '
                f'height="{round(axis(0.0) - top, 2)}" fill="{color}"/>'
            )
            body.append(f'<text x="{round(x + bar_width * 0.45, 2)}" y="{top - 5}" text-anchor="middle" '
                        f'font-size="10">{_fmt(value)}</text>')
        body.append(
            f'<text x="{round(LEFT + (g + 0.5) * group_width, 2)}" y="{HEIGHT - BOTTOM + 15}" '
            f'text-anchor="middle">{escape(scenario)}</text>'
        )
    body += _legend([("Residuum dreifach", METHOD_COLORS["three_way"]),
                     ("omega3 + omega4 vierfach", METHOD_COLORS["model_based"])])
    return _document(title, body)


def write_svg(content: str, output_path: Path) -> Path:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(content, encoding="utf-8")
    logger.info(f"Geschrieben: {output_path}")
    return output_path
