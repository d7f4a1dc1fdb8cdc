"""Batch command-line front end.

Subcommands wire ingestion -> exposures -> fitting -> permutation -> causal
reports. Every command resolves its configuration from defaults, an optional
flat key=value config file, and flags (flags win), persists the resolved
configuration beside its outputs, and embeds the analysis-relevant subset
(plus the seed) in every artifact. Outputs are byte-identical across reruns
with the same configuration and seed; partial outputs are removed on error.
"""

from __future__ import annotations

import datetime as dt
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import ingest as ing
from . import exposure as exp
from . import negbin as nb
from . import causal as cs
from . import permute as pm
from . import simulate as sim
from .errors import DataError, SpillnetError
from .panel import MODE_CROSS_SECTIONAL, MODE_PANEL, ModelSpec, build_design

_FILTER_FLAGS = {"all": exp.FILTER_ALL, "contiguous": exp.FILTER_CONTIGUOUS, "noncontiguous": exp.FILTER_NONCONTIGUOUS}
_LEVEL_FLAGS = {"group,region": ("group", "region"), "group": ("group",), "region": ("region",), "none": ()}


def _parse_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolve(config_path: str | None, defaults: dict, flags: dict) -> dict:
    resolved = dict(defaults)
    if config_path:
        file_values = _parse_config_file(config_path)
        unknown = [k for k in file_values if k not in defaults]
        if unknown:
            raise DataError(f"unknown config keys {unknown}; known: {sorted(defaults)}")
        for key, raw in file_values.items():
            default = defaults[key]
            if isinstance(default, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                resolved[key] = int(raw)
            elif isinstance(default, float):
                resolved[key] = float(raw)
            else:
                resolved[key] = raw
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    return resolved


class _Artifacts:
    """Tracks written files so failures can remove partial outputs."""

    def __init__(self, outdir: str):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.outdir / name
        self.written.append(p)
        return p

    def write_json(self, name: str, payload: dict):
        self.path(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_bytes(self, name: str, payload: bytes):
        self.path(name).write_bytes(payload)

    def cleanup(self):
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _fail(artifacts: _Artifacts | None, exc: Exception):
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record, sort_keys=True), err=True)
    if artifacts is not None:
        artifacts.cleanup()
    sys.exit(1)


def _provenance(resolved: dict, keys: tuple[str, ...], command: str) -> dict:
    out = {"command": command}
    for key in keys:
        if key in resolved:
            out[key] = resolved[key]
    return out


def _write_config(artifacts: _Artifacts, command: str, resolved: dict):
    artifacts.write_json(f"{command}_config.json", {k: resolved[k] for k in sorted(resolved)})


# ---------------------------------------------------------------------------
# Shared input loading


_INPUT_DEFAULTS = {
    "cases": "", "flows": "", "contiguity": "", "covariates": "",
    "start_date": "2020-04-01", "period_length": 14, "n_periods": 10,
}


def _load_panel(resolved: dict):
    for key in ("cases", "covariates"):
        if not resolved[key]:
            raise DataError(f"missing required input path: {key}")
    covtable = ing.parse_covariates(resolved["covariates"])
    raw = ing.parse_cases(resolved["cases"])
    build = ing.build_panel(
        raw,
        period_length_days=int(resolved["period_length"]),
        start_date=dt.date.fromisoformat(resolved["start_date"]),
        n_periods=int(resolved["n_periods"]),
        covariates=covtable,
    )
    return build


def _load_network(resolved: dict, regions):
    if not resolved["flows"] or not resolved["contiguity"]:
        raise DataError("missing required input path: flows and contiguity")
    net = ing.parse_flows(resolved["flows"], regions=set(regions)).network
    contig = ing.parse_contiguity(resolved["contiguity"], regions=set(regions)).graph
    return net, contig


# ---------------------------------------------------------------------------
# Exposure artifact format


def write_exposures_csv(path, lags: exp.LagColumnSet, provenance: dict | None = None):
    names = list(lags.column_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)) + "\n")
        fh.write(f"#meta mode={lags.mode} filter={lags.filter}\n")
        header = ["region", "period", "isolated"]
        for name in names:
            header += [name, name + "_available"]
        fh.write(",".join(header) + "\n")
        for i, region in enumerate(lags.region_order):
            iso = 1 if region in lags.isolated_regions else 0
            for t, plabel in enumerate(lags.period_labels):
                row = [region, plabel, str(iso)]
                for name in names:
                    row.append(repr(float(lags.values(name)[i, t])))
                    row.append(str(int(lags.available(name)[i, t])))
                fh.write(",".join(row) + "\n")


def load_exposures_csv(path) -> exp.LagColumnSet:
    meta = {}
    header = None
    regions: list[str] = []
    periods: list[str] = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#meta"):
                for piece in line.split()[1:]:
                    k, v = piece.split("=", 1)
                    meta[k] = v
                continue
            if line.startswith("#") or not line:
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                continue
            rows.append(parts)
    if header is None or "mode" not in meta:
        raise DataError(f"{path}: not an exposures artifact")
    names = [h for h in header[3:] if not h.endswith("_available")]
    for parts in rows:
        if parts[0] not in regions:
            regions.append(parts[0])
        if parts[1] not in periods:
            periods.append(parts[1])
    R, T = len(regions), len(periods)
    ridx = {r: i for i, r in enumerate(regions)}
    pidx = {p: i for i, p in enumerate(periods)}
    values = {n: np.zeros((R, T)) for n in names}
    avail = {n: np.zeros((R, T), dtype=bool) for n in names}
    isolated = set()
    for parts in rows:
        i, t = ridx[parts[0]], pidx[parts[1]]
        if parts[2] == "1":
            isolated.add(parts[0])
        for j, name in enumerate(names):
            values[name][i, t] = float(parts[3 + 2 * j])
            avail[name][i, t] = parts[4 + 2 * j] == "1"
    for name in names:
        values[name].flags.writeable = False
        avail[name].flags.writeable = False
    return exp.LagColumnSet(
        region_order=tuple(regions),
        period_labels=tuple(periods),
        mode=meta["mode"],
        filter=meta.get("filter", exp.FILTER_ALL),
        _values=values,
        _available=avail,
        isolated_regions=frozenset(isolated),
    )


# ---------------------------------------------------------------------------
# Model assembly shared by fit / permute


def _default_predictors(panel, mode: str, covariate_names) -> list[str]:
    lag_cols = [exp.NETWORK_LAG, exp.NETWORK_DELTA, exp.SPATIAL_LAG, exp.SPATIAL_DELTA, exp.OWN_RATE_LAG]
    if mode == MODE_CROSS_SECTIONAL:
        lag_cols = [exp.NETWORK_LAG, exp.SPATIAL_LAG, exp.OWN_RATE_LAG]
    return lag_cols + list(covariate_names)


def _assemble(resolved: dict, panel, net, contig, lags=None):
    mode = MODE_PANEL if resolved["mode"] == "panel" else MODE_CROSS_SECTIONAL
    filt = _FILTER_FLAGS[resolved["network_filter"]]
    if lags is None:
        lags = exp.build_lag_columns(panel, net, contig, filter=filt, mode=mode)
    if resolved["predictors"]:
        predictors = [p.strip() for p in resolved["predictors"].split(",") if p.strip()]
    else:
        predictors = _default_predictors(panel, mode, panel.covariates)
    if mode == MODE_PANEL and resolved.get("period_dummies", True):
        dummies = list(panel.period_dummy_names())
        uses_lags = any(p in lags.column_names for p in predictors)
        if uses_lags and dummies:
            # reference-period rows drop with the lags; re-anchor the reference
            dummies = dummies[1:]
        predictors += dummies
    spec = ModelSpec(
        outcome=resolved["outcome"],
        predictors=tuple(predictors),
        offset=True,
        random_levels=_LEVEL_FLAGS[resolved["random_levels"]],
        mode=mode,
    )
    design = build_design(panel, lags, spec)
    return design, lags, spec


def _fit_design(design):
    if design.spec.random_levels:
        return nb.fit_nb_mixed(design)
    return nb.fit_nb_glm(design, robust_cluster="group" if len(set(design.group_codes)) > 1 else "rows")


# ---------------------------------------------------------------------------
# Commands


@click.group()
def main():
    """Spillover exposures, multilevel count models, and causal reports."""


_SIM_DEFAULTS = {
    "out": "", "seed": 0, "n_groups": 10, "regions_per_group": 10, "n_periods": 6,
    "network_density": 0.15, "beta_network": 0.0, "beta_spatial": 0.0, "beta_own_rate": 0.0,
    "alpha": 0.5, "sigma2_group": 0.2, "sigma2_region": 0.3, "baseline_rate": 200.0,
    "start_date": "2020-04-01", "period_length": 14,
}


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n-groups", type=int, default=None)
@click.option("--regions-per-group", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--network-density", type=float, default=None)
@click.option("--beta-network", type=float, default=None)
@click.option("--beta-spatial", type=float, default=None)
@click.option("--beta-own-rate", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--sigma2-group", type=float, default=None)
@click.option("--sigma2-region", type=float, default=None)
@click.option("--baseline-rate", type=float, default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
def simulate(config, **flags):
    """Write a synthetic dataset (input CSVs plus the truth record)."""
    artifacts = None
    try:
        resolved = _resolve(config, _SIM_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        true_beta = {}
        if resolved["beta_network"]:
            true_beta[exp.NETWORK_LAG] = resolved["beta_network"]
        if resolved["beta_spatial"]:
            true_beta[exp.SPATIAL_LAG] = resolved["beta_spatial"]
        if resolved["beta_own_rate"]:
            true_beta[exp.OWN_RATE_LAG] = resolved["beta_own_rate"]
        cfg = sim.SimConfig(
            n_groups=resolved["n_groups"],
            regions_per_group=resolved["regions_per_group"],
            n_periods=resolved["n_periods"],
            network_density=resolved["network_density"],
            true_beta=true_beta,
            true_alpha=resolved["alpha"],
            sigma2_group=resolved["sigma2_group"],
            sigma2_region=resolved["sigma2_region"],
            baseline_rate=resolved["baseline_rate"],
            start_date=dt.date.fromisoformat(resolved["start_date"]),
            period_length_days=resolved["period_length"],
            seed=resolved["seed"],
        )
        result = sim.generate(cfg)
        prov = _provenance(resolved, ("seed", "n_groups", "regions_per_group", "n_periods"), "simulate")
        ing.write_cases(result.panel, artifacts.path("cases.csv"), prov)
        ing.write_flows(result.network, artifacts.path("flows.csv"), prov)
        ing.write_contiguity(result.contiguity, artifacts.path("contiguity.csv"), prov)
        ing.write_covariates(result.panel, artifacts.path("covariates.csv"), prov)
        truth = result.truth.to_json_dict()
        truth["provenance"] = prov
        artifacts.write_json("truth.json", truth)
        _write_config(artifacts, "simulate", resolved)
        click.echo(f"wrote synthetic dataset to {resolved['out']}")
    except SpillnetError as exc:
        _fail(artifacts, exc)


_INGEST_DEFAULTS = {**_INPUT_DEFAULTS, "out": "", "seed": 0, "network_filter": "all", "mode": "panel"}


@main.command(name="ingest")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--cases", type=click.Path(exists=True), default=None)
@click.option("--flows", type=click.Path(exists=True), default=None)
@click.option("--contiguity", type=click.Path(exists=True), default=None)
@click.option("--covariates", type=click.Path(exists=True), default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--network-filter", type=click.Choice(sorted(_FILTER_FLAGS)), default=None)
@click.option("--mode", type=click.Choice(["panel", "cross-sectional"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def ingest_cmd(config, **flags):
    """Validate inputs, build the panel, and emit descriptive statistics."""
    artifacts = None
    try:
        resolved = _resolve(config, _INGEST_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        build = _load_panel(resolved)
        panel = build.panel
        lags = None
        if resolved["flows"] and resolved["contiguity"]:
            net, contig = _load_network(resolved, panel.regions)
            mode = MODE_PANEL if resolved["mode"] == "panel" else MODE_CROSS_SECTIONAL
            lags = exp.build_lag_columns(panel, net, contig, filter=_FILTER_FLAGS[resolved["network_filter"]], mode=mode)
        prov = _provenance(resolved, ("seed", "mode", "network_filter", "n_periods"), "ingest")
        stats = ing.describe_panel(panel, lags)
        lines = ["# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)), "variable,mean,sd,min,max"]
        for row in stats:
            lines.append(f"{row['variable']},{row['mean']!r},{row['sd']!r},{row['min']!r},{row['max']!r}")
        artifacts.write_bytes("descriptives.csv", ("\n".join(lines) + "\n").encode("utf-8"))
        artifacts.write_json("panel_summary.json", {
            "provenance": prov,
            "n_regions": panel.n_regions,
            "n_periods": panel.n_periods,
            "n_groups": len(set(panel.group)),
            "n_clamped_cases": build.n_clamped_cases,
            "n_clamped_deaths": build.n_clamped_deaths,
            "periods": list(panel.period_labels),
            "covariates": sorted(panel.covariates),
        })
        _write_config(artifacts, "ingest", resolved)
        click.echo(f"panel: {panel.n_regions} regions x {panel.n_periods} periods")
    except SpillnetError as exc:
        _fail(artifacts, exc)


_EXPOSURE_DEFAULTS = {**_INPUT_DEFAULTS, "out": "", "seed": 0, "network_filter": "all", "mode": "panel"}


@main.command()
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--cases", type=click.Path(exists=True), default=None)
@click.option("--flows", type=click.Path(exists=True), default=None)
@click.option("--contiguity", type=click.Path(exists=True), default=None)
@click.option("--covariates", type=click.Path(exists=True), default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--network-filter", type=click.Choice(sorted(_FILTER_FLAGS)), default=None)
@click.option("--mode", type=click.Choice(["panel", "cross-sectional"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def exposures(config, **flags):
    """Compute the lag columns and write them as a CSV artifact."""
    artifacts = None
    try:
        resolved = _resolve(config, _EXPOSURE_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        panel = _load_panel(resolved).panel
        net, contig = _load_network(resolved, panel.regions)
        mode = MODE_PANEL if resolved["mode"] == "panel" else MODE_CROSS_SECTIONAL
        lags = exp.build_lag_columns(panel, net, contig, filter=_FILTER_FLAGS[resolved["network_filter"]], mode=mode)
        prov = _provenance(resolved, ("seed", "mode", "network_filter", "n_periods"), "exposures")
        write_exposures_csv(artifacts.path("exposures.csv"), lags, prov)
        _write_config(artifacts, "exposures", resolved)
        click.echo(f"wrote lag columns for {len(lags.region_order)} regions")
    except SpillnetError as exc:
        _fail(artifacts, exc)


_FIT_DEFAULTS = {
    **_INPUT_DEFAULTS, "out": "", "seed": 0, "outcome": "deaths", "mode": "panel",
    "network_filter": "all", "predictors": "", "random_levels": "group,region",
    "period_dummies": True, "exposures_file": "",
}

_FIT_PROV_KEYS = ("seed", "outcome", "mode", "network_filter", "predictors", "random_levels", "n_periods")


@main.command(name="fit")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--cases", type=click.Path(exists=True), default=None)
@click.option("--flows", type=click.Path(exists=True), default=None)
@click.option("--contiguity", type=click.Path(exists=True), default=None)
@click.option("--covariates", type=click.Path(exists=True), default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--outcome", type=click.Choice(["deaths", "cases"]), default=None)
@click.option("--mode", type=click.Choice(["panel", "cross-sectional"]), default=None)
@click.option("--network-filter", type=click.Choice(sorted(_FILTER_FLAGS)), default=None)
@click.option("--predictors", default=None, help="Comma-separated predictor names (default: all lags + covariates).")
@click.option("--random-levels", type=click.Choice(sorted(_LEVEL_FLAGS)), default=None)
@click.option("--period-dummies/--no-period-dummies", default=None)
@click.option("--exposures-file", type=click.Path(exists=True), default=None,
              help="Use precomputed lag columns instead of recomputing them.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def fit_cmd(config, **flags):
    """Fit the count model and write the coefficient table."""
    artifacts = None
    try:
        resolved = _resolve(config, _FIT_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        panel = _load_panel(resolved).panel
        if resolved["exposures_file"]:
            lags = load_exposures_csv(resolved["exposures_file"])
            design, lags, spec = _assemble(resolved, panel, None, None, lags=lags)
        else:
            net, contig = _load_network(resolved, panel.regions)
            design, lags, spec = _assemble(resolved, panel, net, contig)
        fit = _fit_design(design)
        prov = _provenance(resolved, _FIT_PROV_KEYS, "fit")
        artifacts.write_bytes("fit_summary.csv", nb.fit_to_csv_bytes(fit, prov))
        artifacts.write_json("fit_summary.json", nb.fit_to_json_dict(fit, prov))
        _write_config(artifacts, "fit", resolved)
        click.echo(f"fit {fit.model} on {fit.n_obs} rows: {fit.convergence.status}")
    except SpillnetError as exc:
        _fail(artifacts, exc)


_PERMUTE_DEFAULTS = {**_FIT_DEFAULTS, "permutations": 100, "predictor": "", "within_period": False}


@main.command(name="permute")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--cases", type=click.Path(exists=True), default=None)
@click.option("--flows", type=click.Path(exists=True), default=None)
@click.option("--contiguity", type=click.Path(exists=True), default=None)
@click.option("--covariates", type=click.Path(exists=True), default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--outcome", type=click.Choice(["deaths", "cases"]), default=None)
@click.option("--mode", type=click.Choice(["panel", "cross-sectional"]), default=None)
@click.option("--network-filter", type=click.Choice(sorted(_FILTER_FLAGS)), default=None)
@click.option("--predictors", default=None)
@click.option("--random-levels", type=click.Choice(sorted(_LEVEL_FLAGS)), default=None)
@click.option("--period-dummies/--no-period-dummies", default=None)
@click.option("--exposures-file", type=click.Path(exists=True), default=None)
@click.option("--permutations", type=int, default=None)
@click.option("--predictor", default=None, help="Predictor to test (repeatable via comma list; default: all lags).")
@click.option("--permute-within-period", "within_period", is_flag=True, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def permute_cmd(config, **flags):
    """Permutation importance for model predictors."""
    artifacts = None
    try:
        resolved = _resolve(config, _PERMUTE_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        panel = _load_panel(resolved).panel
        net, contig = _load_network(resolved, panel.regions)
        design, lags, spec = _assemble(resolved, panel, net, contig)
        if resolved["predictor"]:
            targets = [p.strip() for p in resolved["predictor"].split(",") if p.strip()]
        else:
            targets = [p for p in spec.predictors if p in lags.column_names]
        prov = _provenance(resolved, _FIT_PROV_KEYS + ("permutations",), "permute")
        reports = []
        for name in targets:
            reports.append(pm.permutation_test(
                design, name,
                n_permutations=int(resolved["permutations"]),
                seed=int(resolved["seed"]),
                within_period=bool(resolved["within_period"]),
            ))
        artifacts.write_json("permutations.json", {
            "provenance": prov,
            "reports": [r.to_json_dict() for r in reports],
        })
        lines = ["# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)),
                 "predictor,observed_maape,proportion_lower,n_failed"]
        for r in reports:
            lines.append(f"{r.predictor},{r.observed_maape!r},{r.proportion_lower!r},{r.n_failed}")
        artifacts.write_bytes("permutation_report.csv", ("\n".join(lines) + "\n").encode("utf-8"))
        _write_config(artifacts, "permute", resolved)
        for r in reports:
            click.echo(f"{r.predictor}: proportion_lower={r.proportion_lower:.2f}")
    except SpillnetError as exc:
        _fail(artifacts, exc)


_CAUSAL_DEFAULTS = {
    **_INPUT_DEFAULTS, "out": "", "seed": 0, "outcome": "deaths", "network_filter": "all",
    "method": "all", "treatment": "", "confounders": "", "above_average": "", "threshold": "",
}


@main.command(name="causal")
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--cases", type=click.Path(exists=True), default=None)
@click.option("--flows", type=click.Path(exists=True), default=None)
@click.option("--contiguity", type=click.Path(exists=True), default=None)
@click.option("--covariates", type=click.Path(exists=True), default=None)
@click.option("--start-date", default=None)
@click.option("--period-length", type=int, default=None)
@click.option("--n-periods", type=int, default=None)
@click.option("--outcome", type=click.Choice(["deaths", "cases"]), default=None)
@click.option("--network-filter", type=click.Choice(sorted(_FILTER_FLAGS)), default=None)
@click.option("--method", type=click.Choice(["iptw", "cbps", "super_learner", "all"]), default=None)
@click.option("--treatment", default=None, help="Comma-separated treatment columns (default: lag measures + covariates).")
@click.option("--confounders", default=None, help="Comma-separated confounders (default: all other characteristics).")
@click.option("--above-average", "above_average", default=None,
              help="Comma-separated covariates to dichotomize at their mean.")
@click.option("--threshold", default=None, help="name:cutoff pairs (comma-separated) for >=-cutoff indicators.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
def causal_cmd(config, **flags):
    """Weighting-based causal effects on cumulative counts."""
    artifacts = None
    try:
        resolved = _resolve(config, _CAUSAL_DEFAULTS, flags)
        if not resolved["out"]:
            raise DataError("an output directory is required (--out)")
        artifacts = _Artifacts(resolved["out"])
        panel = _load_panel(resolved).panel
        net, contig = _load_network(resolved, panel.regions)
        lags = exp.build_lag_columns(panel, net, contig, filter=_FILTER_FLAGS[resolved["network_filter"]],
                                     mode=MODE_CROSS_SECTIONAL)

        characteristics = {name: panel.covariates[name] for name in panel.covariates}
        for name in (exp.NETWORK_LAG, exp.SPATIAL_LAG):
            column = lags.values(name)[:, 0]
            ok = lags.available(name)[:, 0]
            if not ok.all():
                raise DataError(f"{name} is unavailable for {int((~ok).sum())} regions; cannot use as characteristic")
            characteristics[name] = column
        # derived indicators replace their parent column (keeping both would
        # make the indicator perfectly separable from its own confounders)
        for name in [s.strip() for s in resolved["above_average"].split(",") if s.strip()]:
            characteristics[f"above_avg_{name}"] = ing.above_average_indicator(characteristics[name]).astype(float)
            characteristics.pop(name)
        for pair in [s.strip() for s in resolved["threshold"].split(",") if s.strip()]:
            name, cutoff = pair.rsplit(":", 1)
            characteristics[f"atleast_{cutoff}_{name}"] = ing.threshold_indicator(
                characteristics[name], float(cutoff)
            ).astype(float)
            characteristics.pop(name)

        if resolved["treatment"]:
            treatments = [t.strip() for t in resolved["treatment"].split(",") if t.strip()]
        else:
            treatments = list(characteristics)
        methods = ["iptw", "cbps", "super_learner"] if resolved["method"] == "all" else [resolved["method"]]
        outcome = panel.cumulative_counts(resolved["outcome"]).astype(float)

        estimates = []
        weight_notes = []
        for treatment in treatments:
            if treatment not in characteristics:
                raise DataError(f"unknown treatment {treatment!r}; have {sorted(characteristics)}")
            if resolved["confounders"]:
                conf_names = [n.strip() for n in resolved["confounders"].split(",") if n.strip()]
            else:
                conf_names = [n for n in characteristics if n != treatment]
            confounders = {n: characteristics[n] for n in conf_names}
            T = np.asarray(characteristics[treatment], dtype=float)
            for method in methods:
                if method == "iptw":
                    ws = cs.iptw_weights(T, confounders, treatment_name=treatment)
                elif method == "cbps":
                    ws = cs.cbps_weights(T, confounders, treatment_name=treatment)
                else:
                    ws = cs.super_learner_weights(T, confounders, seed=int(resolved["seed"]), treatment_name=treatment)
                est = cs.weighted_effect(outcome, T, ws, population=panel.population)
                estimates.append(est)
                weight_notes.append({
                    "method": method, "treatment": treatment, "ess": ws.ess,
                    "n_truncated": ws.n_truncated,
                    "max_balance": max(ws.balance.values()) if ws.balance else 0.0,
                })

        prov = _provenance(resolved, ("seed", "outcome", "network_filter", "method", "treatment"), "causal")
        lines = ["# " + " ".join(f"{k}={prov[k]}" for k in sorted(prov)),
                 "method,treatment,estimate,se,z,p"]
        for est in estimates:
            lines.append(f"{est.method},{est.treatment},{est.estimate!r},{est.se!r},{est.z!r},{est.p!r}")
        artifacts.write_bytes("causal_report.csv", ("\n".join(lines) + "\n").encode("utf-8"))
        artifacts.write_json("causal_report.json", {
            "provenance": prov,
            "estimates": [
                {"method": e.method, "treatment": e.treatment, "estimate": e.estimate,
                 "se": e.se, "z": e.z, "p": e.p, "significant_at_0.05": e.p < 0.05}
                for e in estimates
            ],
            "weights": weight_notes,
        })
        _write_config(artifacts, "causal", resolved)
        click.echo(f"estimated {len(estimates)} causal effects")
    except SpillnetError as exc:
        _fail(artifacts, exc)


@main.command(name="report")
@click.option("--out", type=click.Path(exists=True), required=True)
def report_cmd(out):
    """Merge artifacts in a directory into one human-readable summary."""
    artifacts = None
    try:
        artifacts = _Artifacts(out)
        outdir = Path(out)
        sections = ["# Run summary\n"]
        for name, title in [
            ("panel_summary.json", "Panel"),
            ("fit_summary.json", "Model fit"),
            ("permutations.json", "Permutation tests"),
            ("causal_report.json", "Causal estimates"),
            ("truth.json", "Simulation truth"),
        ]:
            path = outdir / name
            if not path.exists():
                continue
            payload = json.loads(path.read_text(encoding="utf-8"))
            sections.append(f"## {title}\n")
            if name == "fit_summary.json":
                sections.append(f"model: {payload['model']}, n={payload['n_obs']}, "
                                f"status: {payload['convergence']['status']}\n")
                sections.append("| term | beta | se | robust se | p |\n|---|---|---|---|---|")
                robust = payload["robust_se"] or [float("nan")] * len(payload["terms"])
                for j, term in enumerate(payload["terms"]):
                    sections.append(
                        f"| {term} | {payload['beta'][j]:.4f} | {payload['se'][j]:.4f} "
                        f"| {robust[j]:.4f} | {payload['p'][j]:.4f} |"
                    )
                sections.append(f"\nln(alpha) = {payload['ln_alpha']:.4f}")
                for lv, piece in payload["variance_components"].items():
                    sections.append(f"{lv}-level variance = {piece['estimate']:.4f}")
                sections.append("")
            elif name == "permutations.json":
                sections.append("| predictor | observed MAAPE | proportion lower | failed |\n|---|---|---|---|")
                for r in payload["reports"]:
                    sections.append(f"| {r['predictor']} | {r['observed_maape']:.4f} "
                                    f"| {r['proportion_lower']:.2f} | {r['n_failed']} |")
                sections.append("")
            elif name == "causal_report.json":
                sections.append("| method | treatment | estimate | se | z | p |\n|---|---|---|---|---|---|")
                for e in payload["estimates"]:
                    sections.append(f"| {e['method']} | {e['treatment']} | {e['estimate']:.4f} "
                                    f"| {e['se']:.4f} | {e['z']:.2f} | {e['p']:.4f} |")
                sections.append("")
            else:
                sections.append("```json")
                sections.append(json.dumps(payload, indent=2, sort_keys=True))
                sections.append("```\n")
        artifacts.path("report.md").write_text("\n".join(sections) + "\n", encoding="utf-8")
        click.echo(f"wrote {outdir / 'report.md'}")
    except (SpillnetError, json.JSONDecodeError) as exc:
        _fail(artifacts, exc)


if __name__ == "__main__":
    main()
