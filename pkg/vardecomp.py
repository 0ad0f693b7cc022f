#!/usr/bin/env python3
"""vardecomp: kausale Varianzzerlegung fuer Patientendaten mit Klinik/Chirurg-Clustering.

Befehle:
    simulate      - Synthetische Population + wahre Komponenten (Monte Carlo)
    decompose     - Modelle fitten und Komponenten schaetzen (model/semi/threeway/hypothetical)
    replicate     - Replikationsgitter mit Zusammenfassung und SVG-Grafiken
    oracle-check  - Schaetzer gegen Brute-Force-Auswertung diskreter Instanzen

Konfiguration: Flag > --config (TOML/JSON) > Umgebung (VARDECOMP_SEED, VARDECOMP_THREADS) > Default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

from decomposer.errors import ConfigError, DataError, VarDecompError

logger = logging.getLogger("vardecomp")

# Schluessel, die nicht in die aufgeloeste Konfiguration geschrieben werden:
# threads und verbose beeinflussen die Ergebnisse nicht.
_NOT_PERSISTED = {"func", "command", "config", "threads", "verbose"}
_NOT_CONFIGURABLE = {"func", "command", "config", "verbose"}

SIMULATE_DEFAULTS = {
    "n": 1000,
    "m": 5,
    "q": 25,
    "outcome": "binary",
    "seed": 0,
    "n_mc": 200_000,
    "effect_sd_hospital": 2.0**0.5,
    "effect_sd_surgeon": 2.0**0.5,
    "assign_intercept_sd": 0.5,
    "assign_coef_sd": 0.5**0.5,
    "output": "simulated.csv",
}

DECOMPOSE_DEFAULTS = {
    "input": None,
    "output": None,
    "method": ["model"],
    "target": "uniform",
    "nested_assignment": False,
    "bootstrap": 0,
    "level": 0.95,
    "resample_effects": "redraw",
    "residual_mode": None,
    "reml": False,
    "strict_ids": False,
    "outcome": "auto",
    "id_col": "id",
    "hospital_col": "hospital",
    "surgeon_col": "surgeon",
    "y_col": "y",
    "covariates": None,
    "min_cell_count": 2,
    "seed": 0,
}

REPLICATE_DEFAULTS = {
    "grid": "desk",
    "n": None,
    "m": None,
    "q": None,
    "full": False,
    "replications": None,
    "mechanism": "fixed",
    "estimators": "model_based,three_way,semi_parametric",
    "outcome": "binary",
    "n_mc": 200_000,
    "nested_assignment": False,
    "reml": False,
    "seed": 0,
    "output": "results/replicate",
}

ORACLE_DEFAULTS = {
    "instances": [],
    "output": "oracle_check.json",
    "tol": 1e-10,
}

METHOD_NAMES = {
    "model": "model_based",
    "semi": "semi_parametric",
    "threeway": "three_way",
    "hypothetical": "hypothetical",
}


def _load_config_file(path: Path) -> dict:
    """Liest eine Konfigurationsdatei (TOML nach Endung .toml, sonst JSON)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Konfigurationsdatei nicht gefunden: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with path.open("rb") as handle:
                values = tomllib.load(handle)
        else:
            values = json.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Konfigurationsdatei ungueltig ({path.name}): {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"Konfigurationsdatei muss ein Objekt enthalten: {path}")
    return {str(k).replace("-", "_"): v for k, v in values.items()}


def resolve_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Flag > Konfigurationsdatei > Umgebung > Default."""
    from decomposer.utils import resolve_seed

    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(file_values) - set(defaults) - _NOT_CONFIGURABLE - {"threads"})
    if unknown:
        raise ConfigError(f"Unbekannte Konfigurationsschluessel: {unknown}")

    resolved = {**defaults, "threads": None}
    if "seed" in defaults:
        resolved["seed"] = resolve_seed(defaults["seed"])
    resolved.update({k: v for k, v in file_values.items() if k not in _NOT_CONFIGURABLE})
    resolved.update({k: v for k, v in vars(args).items() if k not in _NOT_CONFIGURABLE and v not in (None, [])})
    return resolved


def _threads(resolved: dict) -> int:
    from decomposer.utils import resolve_threads

    explicit = resolved.get("threads")
    if explicit is not None:
        if explicit < 1:
            raise ConfigError(f"--threads muss >= 1 sein: {explicit}")
        return explicit
    return resolve_threads()


def _sibling(path: Path, suffix: str) -> Path:
    """sim.csv + '_truth.json' -> sim_truth.json."""
    path = Path(path)
    return path.with_name(f"{path.stem}{suffix}")


def _write_resolved_config(command: str, resolved: dict, output: Path) -> Path:
    from decomposer.utils import write_json

    persisted = {k: v for k, v in resolved.items() if k not in _NOT_PERSISTED}
    return write_json({"command": command, **persisted}, output)


def _outcome_kind(value: str | None):
    if value in (None, "auto"):
        return None
    if value not in ("binary", "continuous"):
        raise ConfigError(f"Unbekannter Outcome-Typ: {value}")
    return value


def _mixed_options(resolved: dict):
    from decomposer.models import MixedOptions

    return MixedOptions(reml=bool(resolved.get("reml", False)))


def cmd_simulate(args):
    """Synthetische Population mit Wahrheit und Konfiguration."""
    from decomposer.data import write_dataset
    from decomposer.models import SimConfig
    from decomposer.simulation import draw_generating_params, generate_population, true_components
    from decomposer.utils import STREAM_PARAMS, spawn_rng, write_json

    resolved = resolve_config(args, SIMULATE_DEFAULTS)
    cfg = SimConfig(
        n=int(resolved["n"]),
        m=int(resolved["m"]),
        q=int(resolved["q"]),
        seed=int(resolved["seed"]),
        outcome_kind=_outcome_kind(resolved["outcome"]) or "binary",
        effect_sd_hospital=float(resolved["effect_sd_hospital"]),
        effect_sd_surgeon=float(resolved["effect_sd_surgeon"]),
        assign_intercept_sd=float(resolved["assign_intercept_sd"]),
        assign_coef_sd=float(resolved["assign_coef_sd"]),
    )
    params = draw_generating_params(cfg, spawn_rng(cfg.seed, STREAM_PARAMS))
    population = generate_population(cfg, params)
    truth = true_components(params, int(resolved["n_mc"]), seed=cfg.seed)

    output = Path(resolved["output"])
    write_dataset(population.dataset, output)
    truth_path = write_json(
        {
            "config": cfg.to_dict(),
            "truth": truth.to_dict(),
            "params": params.to_dict(),
            "empty_cells": [list(cell) for cell in population.empty_cells],
        },
        _sibling(output, "_truth.json"),
    )
    _write_resolved_config("simulate", {**resolved, "output": str(output)}, _sibling(output, "_config.json"))
    print(f"✓ {population.dataset.n} Patienten -> {output}")
    print(f"✓ Wahrheit -> {truth_path}")


def cmd_decompose(args):
    """Zuweisungs- und Outcome-Modelle fitten, Komponenten schaetzen, optional Intervalle."""
    from decomposer.assignment import fit_joint_multinomial, fit_nested_multinomial
    from decomposer.data import (
        ColumnSchema,
        load_dataset,
        positivity_report,
        write_label_map,
        write_positivity_report,
    )
    from decomposer.decomposition import (
        decompose_hypothetical,
        decompose_model_based,
        decompose_semiparametric,
        decompose_three_way,
        icc_summary,
        observed_target,
        uniform_target,
        volume_preserving_target,
    )
    from decomposer.outcome import fit_marginal_models, fit_outcome_model
    from decomposer.report import format_components_report
    from decomposer.uncertainty import component_posterior, write_draws_csv
    from decomposer.utils import write_json

    resolved = resolve_config(args, DECOMPOSE_DEFAULTS)
    if not resolved["input"]:
        raise ConfigError("Eingabedatei fehlt (Argument input oder Schluessel 'input')")
    methods = resolved["method"] or ["model"]
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise ConfigError(f"Unbekannte Methode(n): {unknown}")
    if resolved["target"] not in ("uniform", "volume", "observed"):
        raise ConfigError(f"Unbekanntes Ziel: {resolved['target']}")
    if not 0.0 < float(resolved["level"]) < 1.0:
        raise ConfigError(f"--level muss in (0, 1) liegen: {resolved['level']}")

    input_path = Path(resolved["input"])
    output = Path(resolved["output"]) if resolved["output"] else _sibling(input_path, "_decomposition.json")
    covariates = resolved["covariates"]
    if isinstance(covariates, str):
        covariates = tuple(c.strip() for c in covariates.split(",") if c.strip())
    schema = ColumnSchema(
        id=resolved["id_col"],
        hospital=resolved["hospital_col"],
        surgeon=resolved["surgeon_col"],
        y=resolved["y_col"],
        covariates=tuple(covariates) if covariates is not None else None,
    )
    d = load_dataset(
        input_path,
        schema,
        outcome_kind=_outcome_kind(resolved["outcome"]),
        relabel=not resolved["strict_ids"],
    )
    n_jobs = _threads(resolved)
    opts = _mixed_options(resolved)

    report = positivity_report(d, min_count=int(resolved["min_cell_count"]))
    write_positivity_report(report, _sibling(output, "_positivity.csv"))
    write_label_map(d, _sibling(output, "_labels.csv"))

    eta = (
        fit_nested_multinomial(d, n_jobs=n_jobs)
        if resolved["nested_assignment"]
        else fit_joint_multinomial(d)
    )
    theta = fit_outcome_model(d, opts)

    mode = resolved["residual_mode"]
    components = {}
    for method in dict.fromkeys(methods):
        name = METHOD_NAMES[method]
        if name == "model_based":
            components[name] = decompose_model_based(d, theta, eta, mode or "model_based")
        elif name == "three_way":
            components[name] = decompose_three_way(d, theta, eta, mode or "by_subtraction")
        elif name == "semi_parametric":
            mm = fit_marginal_models(d, opts, model_szx=theta)
            components[name] = decompose_semiparametric(d, mm, mode or "by_subtraction")
        else:
            target = {
                "uniform": lambda: uniform_target(d.hierarchy),
                "volume": lambda: volume_preserving_target(d),
                "observed": lambda: observed_target(eta),
            }[resolved["target"]]()
            components[name] = decompose_hypothetical(d, theta, target, mode or "model_based")

    payload = {
        "input": str(input_path),
        "dataset": d.summary(),
        "assignment": eta.to_dict(),
        "outcome": theta.to_dict(),
        "options": opts.to_dict(),
        "components": {name: vc.to_dict() for name, vc in components.items()},
        "flagged_cells": int((report["flags"] != "").sum()),
    }
    if "hypothetical" in components:
        payload["target"] = resolved["target"]
    if theta.link == "identity":
        payload["icc"] = icc_summary(theta)

    intervals = None
    R = int(resolved["bootstrap"])
    if R > 0:
        draws, intervals = component_posterior(
            d, theta, eta,
            R=R,
            seed=int(resolved["seed"]),
            level=float(resolved["level"]),
            opts=opts,
            resample_effects=resolved["resample_effects"],
            n_jobs=n_jobs,
        )
        payload["intervals"] = intervals.to_dict()
        payload["posterior"] = {
            "R": draws.R,
            "seed": draws.seed,
            "failed_replicates": draws.failed_replicates,
            "negative_draws": int(draws.negative_rows.sum()),
        }
        write_draws_csv(draws, _sibling(output, "_draws.csv"))

    write_json(payload, output)
    table_path = _sibling(output, "_table.md")
    table = format_components_report(components.values(), intervals, title=f"Varianzzerlegung: {input_path.name}")
    table_path.write_text(table, encoding="utf-8")
    logger.info(f"Geschrieben: {table_path}")
    _write_resolved_config(
        "decompose",
        {**resolved, "input": str(input_path), "output": str(output)},
        _sibling(output, "_config.json"),
    )

    print(f"\n{'=' * 60}")
    print(table.rstrip())
    print(f"{'=' * 60}")
    print(f"\n✓ Komponenten -> {output}")
    print(f"✓ Tabelle -> {table_path}")


def _grid(resolved: dict) -> list[tuple[int, int, int]]:
    from decomposer.simulation import DESK_GRID

    single = [resolved[k] for k in ("n", "m", "q")]
    if any(v is not None for v in single):
        if any(v is None for v in single):
            raise ConfigError("Einzelszenario braucht --n, --m und --q")
        return [tuple(int(v) for v in single)]
    if resolved["grid"] != "desk":
        raise ConfigError(f"Unbekanntes Gitter: {resolved['grid']}")
    return list(DESK_GRID)


def cmd_replicate(args):
    """Replikationsgitter: Tabelle, Zusammenfassung, Balken- und Dichtegrafiken (auch ueber n)."""
    from decomposer.figures import bar_chart_svg, comparison_svg, density_overlay_svg, density_svg, write_svg
    from decomposer.models import COMPONENT_NAMES, SimConfig
    from decomposer.report import format_replication_report
    from decomposer.simulation import DEFAULT_REPLICATIONS, FULL_REPLICATIONS, run_replications
    from decomposer.utils import write_json

    resolved = resolve_config(args, REPLICATE_DEFAULTS)
    replications = resolved["replications"]
    if replications is None:
        replications = FULL_REPLICATIONS if resolved["full"] else DEFAULT_REPLICATIONS
    replications = int(replications)
    if replications < 1:
        raise ConfigError(f"--replications muss >= 1 sein: {replications}")
    if resolved["mechanism"] not in ("fixed", "redraw"):
        raise ConfigError(f"Unbekannter Mechanismus: {resolved['mechanism']}")
    estimators = resolved["estimators"]
    if isinstance(estimators, str):
        estimators = [e.strip() for e in estimators.split(",") if e.strip()]

    out_dir = Path(resolved["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    n_jobs = _threads(resolved)
    seed = int(resolved["seed"])

    summaries = {}
    comparison_rows = []
    by_design: dict[tuple[int, int], list] = {}
    for n, m, q in _grid(resolved):
        cfg = SimConfig(n=n, m=m, q=q, seed=seed, outcome_kind=_outcome_kind(resolved["outcome"]) or "binary")
        result = run_replications(
            cfg,
            replications=replications,
            estimators=estimators,
            seed=seed,
            mechanism=resolved["mechanism"],
            n_mc=int(resolved["n_mc"]),
            opts=_mixed_options(resolved),
            nested_assignment=bool(resolved["nested_assignment"]),
            n_jobs=n_jobs,
        )
        scenario = result.scenario
        csv_path = out_dir / f"{scenario}.csv"
        result.table.to_csv(csv_path, index=False, lineterminator="\n")
        logger.info(f"Geschrieben: {csv_path}")
        summary = {"config": cfg.to_dict(), "failed": result.failed, **result.summary}
        write_json(summary, out_dir / f"{scenario}_summary.json")

        title = f"n={n}, m={m}, q={q} ({replications} Replikate)"
        write_svg(bar_chart_svg(result.summary, title), out_dir / f"{scenario}_bars.svg")
        if "model_based" in set(result.table["method"]):
            write_svg(density_svg(result.table, result.summary["truth"], title), out_dir / f"{scenario}_density.svg")
        comparison = result.summary.get("three_vs_four_way")
        if comparison:
            comparison_rows.append((
                scenario,
                comparison["three_way_residual_mean"],
                comparison["omega3_plus_omega4_mean"],
            ))
        summaries[scenario] = summary
        by_design.setdefault((m, q), []).append((n, result))
        print(f"✓ {scenario}: {replications - len(result.failed)} Replikate -> {csv_path}")

    if comparison_rows:
        write_svg(
            comparison_svg(comparison_rows, "Residuum dreifach vs. omega3 + omega4 vierfach"),
            out_dir / "comparison.svg",
        )

    for (m, q), members in by_design.items():
        if len(members) < 2:
            continue
        for component in COMPONENT_NAMES:
            samples = {
                f"n={n}": result.table.loc[
                    (result.table["method"] == "model_based") & (result.table["component"] == component),
                    "estimate",
                ].to_numpy()
                for n, result in members
            }
            if not any(s.size for s in samples.values()):
                continue
            # Wahrheit nur markieren, wenn alle Szenarien dieselbe haben
            truths = {result.summary["truth"][component] for _, result in members}
            truth = truths.pop() if len(truths) == 1 else None
            write_svg(
                density_overlay_svg(samples, truth, f"{component} ueber n (m={m}, q={q})"),
                out_dir / f"m{m}_q{q}_{component}_by_n.svg",
            )
    report = format_replication_report(summaries)
    report_path = out_dir / "report.md"
    report_path.write_text(report, encoding="utf-8")
    logger.info(f"Geschrieben: {report_path}")
    summary_path = write_json(summaries, out_dir / "summary.json")
    _write_resolved_config("replicate", {**resolved, "output": str(out_dir)}, out_dir / "replicate_config.json")

    print(f"\nReport:  {report_path}")
    print(f"Daten:   {summary_path}")


def cmd_oracle_check(args):
    """Vergleicht den Schaetzer-Code mit der Brute-Force-Auswertung."""
    from decomposer.oracle import check_instances, fixture_paths
    from decomposer.utils import write_json

    resolved = resolve_config(args, ORACLE_DEFAULTS)
    paths = [Path(p) for p in resolved["instances"]] or fixture_paths()
    if not paths:
        raise DataError("Keine Instanzen gefunden")
    checks = check_instances(paths)
    tol = float(resolved["tol"])
    output = Path(resolved["output"])
    write_json({"tol": tol, "instances": [c.to_dict() for c in checks]}, output)
    _write_resolved_config(
        "oracle-check",
        {**resolved, "instances": [str(p) for p in paths], "output": str(output)},
        _sibling(output, "_config.json"),
    )

    failed = [c.name for c in checks if c.max_abs_diff > tol]
    for check in checks:
        mark = "✗" if check.name in failed else "✓"
        print(f"{mark} {check.name}: max |Oracle - Schaetzer| = {check.max_abs_diff:.2e}")
    print(f"\nDaten:   {output}")
    if failed:
        raise VarDecompError(f"Oracle-Abweichung ueber {tol:g}: {failed}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="vardecomp: kausale Varianzzerlegung (Fallmix, Klinik, Chirurg, Residuum)",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    # Nicht gesetzte Flags fehlen im Namespace, damit Datei und Umgebung greifen.
    suppress = argparse.SUPPRESS

    # --- Gemeinsame Argumente ---
    run_common = argparse.ArgumentParser(add_help=False, argument_default=suppress)
    run_common.add_argument("--config", type=Path, help="TOML- oder JSON-Konfiguration")
    run_common.add_argument("--seed", type=int, help="Default: VARDECOMP_SEED oder 0")
    run_common.add_argument("--threads", type=int, help="Default: VARDECOMP_THREADS oder alle Kerne")

    outcome_common = argparse.ArgumentParser(add_help=False, argument_default=suppress)
    kind = outcome_common.add_mutually_exclusive_group()
    kind.add_argument("--binary", dest="outcome", action="store_const", const="binary")
    kind.add_argument("--continuous", dest="outcome", action="store_const", const="continuous")

    fit_common = argparse.ArgumentParser(add_help=False, argument_default=suppress)
    fit_common.add_argument("--nested-assignment", action="store_true",
                            help="Klinik- und Chirurgenmodell getrennt statt gemeinsam")
    fit_common.add_argument("--reml", action="store_true", help="REML statt ML (nur Identity-Link)")

    # --- Befehle ---
    p = sub.add_parser("simulate", parents=[run_common, outcome_common], argument_default=suppress,
                       help="Synthetische Population + Wahrheit")
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--n-mc", type=int, help="Monte-Carlo-Umfang der Wahrheit")
    p.add_argument("--effect-sd-hospital", type=float)
    p.add_argument("--effect-sd-surgeon", type=float)
    p.add_argument("--assign-intercept-sd", type=float)
    p.add_argument("--assign-coef-sd", type=float)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decompose", parents=[run_common, fit_common], argument_default=suppress,
                       help="Komponenten aus einer Patienten-CSV schaetzen")
    p.add_argument("input", type=Path, nargs="?", default=None, help="CSV id,hospital,surgeon,y,x1,...")
    p.add_argument("-o", "--output", type=Path, help="Default: <input>_decomposition.json")
    p.add_argument("--method", action="append", choices=sorted(METHOD_NAMES),
                   help="Mehrfach angebbar (Default: model)")
    p.add_argument("--target", choices=["uniform", "volume", "observed"],
                   help="Ziel-Zuweisung fuer --method hypothetical")
    p.add_argument("--bootstrap", type=int, metavar="R", help="Anzahl Posterior-Ziehungen (0 = keine)")
    p.add_argument("--level", type=float, help="Intervallniveau (Default: 0.95)")
    p.add_argument("--resample-effects", choices=["redraw", "fixed"])
    p.add_argument("--residual-mode", choices=["model_based", "by_subtraction"])
    p.add_argument("--outcome", choices=["auto", "binary", "continuous"])
    p.add_argument("--strict-ids", action="store_true", help="Ids muessen bereits 1..m / 1..h_z sein")
    p.add_argument("--id-col")
    p.add_argument("--hospital-col")
    p.add_argument("--surgeon-col")
    p.add_argument("--y-col")
    p.add_argument("--covariates", help="z.B. age,sex (Default: alle uebrigen Spalten)")
    p.add_argument("--min-cell-count", type=int)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("replicate", parents=[run_common, outcome_common, fit_common],
                       argument_default=suppress, help="Replikationsgitter + Grafiken")
    p.add_argument("--grid", choices=["desk"])
    p.add_argument("--n", type=int, help="Einzelszenario statt Gitter (mit --m, --q)")
    p.add_argument("--m", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--full", action="store_true", help="1000 statt 200 Replikate")
    p.add_argument("--replications", type=int)
    p.add_argument("--mechanism", choices=["fixed", "redraw"])
    p.add_argument("--estimators", help="z.B. model_based,three_way,semi_parametric")
    p.add_argument("--n-mc", type=int)
    p.add_argument("-o", "--output", type=Path, help="Ausgabeordner")
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("oracle-check", argument_default=suppress,
                       help="Schaetzer gegen Brute-Force-Oracle pruefen")
    p.add_argument("instances", type=Path, nargs="*", default=None, help="Default: mitgelieferte Fixtures")
    p.add_argument("--config", type=Path)
    p.add_argument("--tol", type=float)
    p.add_argument("-o", "--output", type=Path)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    from decomposer.utils import autoload_env

    autoload_env([Path.cwd(), Path(__file__).resolve().parent])
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
    )

    try:
        args.func(args)
    except VarDecompError as exc:
        logger.error(str(exc))
        return exc.exit_code
    except FileNotFoundError as exc:
        logger.error(str(exc))
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
