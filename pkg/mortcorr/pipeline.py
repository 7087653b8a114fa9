""" License: This file is part of the mortcorr repository
             mortcorr is licensed under the Apache-2.0 license.

End-to-end workflow: ingest national data, correct the period tables
for the uniform-births assumption, fit and select a mortality model,
project it and derive the longevity trend SCR outputs. Every stage
writes CSV/JSON artifacts and the run ends with a manifest of
checksums.
"""
import hashlib
import json
import logging
import os

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from mortcorr import __version__
from mortcorr.fertility import CorrectionIndicator, anomaly_report, compute_indicator
from mortcorr.fertility import correct_surface
from mortcorr.forecast import DynamicsError, HorizonError, compare_fans, estimate_dynamics
from mortcorr.forecast import export_scenarios, historical_overlay
from mortcorr.forecast import life_expectancy_fan, percentile_table, simulate
from mortcorr.hmd import parse_deaths_lexis, parse_monthly_births, parse_population
from mortcorr.hmd import read_table, write_surface_bundle, write_table
from mortcorr.lexis import build_surface, close_table, improvements
from mortcorr.lexis import period_life_expectancy_series, to_q
from mortcorr.models import bic_table, compare_bic, fit_model, parameter_stability
from mortcorr.models import residual_randomness
from mortcorr.scr import AnnuityPortfolio, build_shocked_tables, ie_curve, improvement_path
from mortcorr.scr import scr_impact, stability_indicator

STAGES = ("ingest", "surface", "correct", "fit", "select", "project", "scr")
MANIFEST = "manifest.json"
FAILED = "FAILED"


class StageError(RuntimeError):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage, cause):
        super().__init__("Stage %r failed: %s" % (stage, cause))
        self.stage = stage
        self.cause = cause


class SelectionError(ValueError):
    pass


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (pd.Series, pd.DataFrame)):
        return json.loads(value.to_json(orient="split", double_precision=15))
    raise TypeError("Not JSON serialisable: %r" % type(value))


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, default=_jsonable) + "\n",
                          encoding="utf-8")
    return Path(path)


class ArtifactWriter:
    """Writes artifacts below ``output_dir`` with the provenance header
    (tool version, config digest, seed, input checksums) and keeps the
    list for the manifest.
    """

    def __init__(self, output_dir, config=None, inputs=None):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.inputs = {os.path.basename(p): sha256_file(p) for p in (inputs or []) if p}
        self.metadata = {"mortcorr_version": __version__, "input_checksums": self.inputs}
        if config is not None:
            self.metadata["config_digest"] = config.digest()
            self.metadata["seed"] = config.seed
        self.artifacts = []

    def path(self, name):
        return self.output_dir / name

    def record(self, paths):
        for p in paths:
            rel = os.path.relpath(p, self.output_dir)
            if rel not in self.artifacts:
                self.artifacts.append(rel)
        return paths

    def table(self, name, frame, index=False, **extra):
        return self.record(write_table(frame, self.path(name), {**self.metadata, **extra},
                                        index=index))

    def grid(self, name, frame, **extra):
        """Age-by-year frame."""
        return self.table(name, frame, index=True, **extra)

    def qsurface(self, name, q, **extra):
        frame = pd.DataFrame(q.q, index=pd.Index(q.ages, name="age"),
                             columns=[str(t) for t in q.years])
        return self.grid(name, frame, field="q", gender=q.gender, source=q.source, **extra)

    def surface(self, prefix, surface):
        return self.record(write_surface_bundle(surface, str(self.path(prefix)), self.metadata))

    def json(self, name, obj):
        return self.record([dump_json({"metadata": self.metadata, "content": obj},
                                       self.path(name))])

    def fitted(self, prefix, params, diag):
        """Parameter JSON, one CSV per parameter vector and the
        standardised residual grid of a fit.
        """
        written = self.json("%s_params.json" % prefix, params.to_dict())
        for name, part in params.components().items():
            frame = part.to_frame() if isinstance(part, pd.Series) else part
            written += self.table("%s_%s.csv" % (prefix, name), frame, index=True)
        written += self.grid("%s_residuals.csv" % prefix, pd.DataFrame(
            diag.residuals, index=pd.Index(params.ages, name="age"),
            columns=[str(t) for t in params.years]))
        return written

    def netcdf(self, name, scenarios):
        return self.record([export_scenarios(scenarios, str(self.path(name)), {
            "config_digest": self.metadata.get("config_digest", ""),
            "mortcorr_version": __version__})])

    def manifest(self, status, notes=None):
        entries = [{"path": rel, "sha256": sha256_file(self.path(rel))}
                   for rel in sorted(self.artifacts)]
        doc = {"metadata": self.metadata, "stages": status, "artifacts": entries,
               "notes": notes or {}}
        if self.config is not None:
            doc["config"] = self.config.to_dict()
        return dump_json(doc, self.path(MANIFEST))

    def fail(self, stage, error, status):
        """Leave partial artifacts in place with a FAILED marker."""
        self.path(FAILED).write_text("stage: %s\nerror: %s\n" % (stage, error), encoding="utf-8")
        return self.manifest(status, notes={"failed_stage": stage, "error": str(error)})


@dataclass
class ModelSelection:
    model: str
    best_bic: str
    report: pd.DataFrame
    override: str = None

    def to_dict(self):
        return {
            "model": self.model,
            "best_bic": self.best_bic,
            "override": self.override,
            "report": self.report.to_dict(orient="records"),
        }


def select_model(fits, stability=None, weights=None, override=None):
    """Rank fits by BIC and add the advisory criteria: runs tests on the
    signs of standardised residuals along age, time and cohort, and the
    parameter drift after shortening the data. With the default weights
    the selection is the best BIC; ``override`` names a model that wins
    regardless, and the report keeps both.
    """
    if not fits:
        raise SelectionError("No fitted models to select from")
    weights = weights or {"bic": 1.}
    report = compare_bic(fits).rename(columns={"rank": "bic_rank"})
    by_model = {fit.model: fit for fit in fits}
    runs = {}
    for model, fit in by_model.items():
        A, T = fit.residuals.shape
        runs[model] = residual_randomness(fit.residuals, np.arange(A), np.arange(T))
    for axis in ("age", "time", "cohort"):
        report["runs_p_%s" % axis] = [runs[m][axis][1] for m in report.model]
    report["runs_p_min"] = report[["runs_p_age", "runs_p_time", "runs_p_cohort"]].min(axis=1)
    stability = stability or {}
    report["stability_window"] = [stability.get(m, {}).get("window", np.nan)
                                  for m in report.model]
    report["stability_age_band"] = [stability.get(m, {}).get("age_band", np.nan)
                                    for m in report.model]
    score = weights.get("bic", 0.) * report.bic_rank
    if weights.get("runs"):
        score = score + weights["runs"] * report.runs_p_min.rank(ascending=False, method="min")
    if weights.get("stability"):
        drift = report[["stability_window", "stability_age_band"]].max(axis=1)
        score = score + weights["stability"] * drift.rank(method="min")
    report["score"] = score
    ranked = report.sort_values(["score", "bic_rank"], kind="mergesort")
    best = str(ranked.model.iloc[0])
    best_bic = str(report.model.iloc[0])
    chosen = best
    if override is not None:
        if override not in by_model:
            raise SelectionError("Override %r was not fitted" % override)
        if override != best:
            logging.info("Model %s selected by override instead of %s" % (override.upper(),
                                                                         best.upper()))
        chosen = override
    report["selected"] = report.model == chosen
    return ModelSelection(model=chosen, best_bic=best_bic, report=report, override=override)


@dataclass
class PipelineResult:
    output_dir: Path
    status: dict
    artifacts: list
    selection: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def manifest(self):
        return self.output_dir / MANIFEST


def load_inputs(config):
    """Parse the HMD/HFD files named in ``config``."""
    for key in ("deaths_path", "population_path"):
        if not getattr(config, key):
            raise ValueError("Configuration lacks %s" % key)
    data = {
        "deaths": parse_deaths_lexis(config.deaths_path),
        "population": parse_population(config.population_path),
        "births": None,
        "predicted": None,
    }
    if config.births_path and not config.skip_correction:
        data["births"] = parse_monthly_births(config.births_path)
    if config.predicted_indicator_path and not config.skip_correction:
        frame, _ = read_table(config.predicted_indicator_path)
        data["predicted"] = CorrectionIndicator.from_frame(frame)
    return data


def calibration_surface(data, config):
    """Crude surface on the configured age band and year window (the
    last ``calibration_years`` available years by default).
    """
    full = build_surface(data["deaths"], data["population"], gender=config.gender,
                         ages=(config.age_min, config.age_max),
                         vintage=config.population_vintage)
    year_max = config.year_max or int(full.years[-1])
    year_min = config.year_min or max(int(full.years[0]), year_max - config.calibration_years + 1)
    return full.subset(years=(year_min, year_max))


def load_indicator(data, config):
    indicator = CorrectionIndicator()
    if data["births"] is not None:
        indicator = compute_indicator(data["births"], weights=config.month_weights)
    if data["predicted"] is not None:
        indicator = indicator.merge(data["predicted"])
    if not indicator.cohorts:
        raise ValueError("No correction indicator: give births_path or "
                         "predicted_indicator_path, or set skip_correction")
    return indicator


def project_model(params, config):
    dynamics = estimate_dynamics(params)
    scenarios = simulate(params, dynamics, n_scenarios=config.n_scenarios,
                         horizon=config.horizon, seed=config.seed, omega=config.omega,
                         closure_fit_ages=config.closure_fit_ages)
    return dynamics, scenarios


def overlay(writer, dataset, surface, model, config):
    """Back-test table of projected against realised improvement rates
    over the last ``config.holdout`` years.
    """
    try:
        frame = historical_overlay(surface, model, holdout=config.holdout, omega=config.omega)
    except DynamicsError as ee:
        logging.warning("No historical overlay for %s: %s" % (dataset, ee))
        return []
    return writer.table("%s_historical_overlay.csv" % dataset, frame)


def shocked_tables(be_scenarios, scr_scenarios):
    """Best Estimate from the central path of ``be_scenarios``; SCR path
    from the 0.5th percentile table of ``scr_scenarios``; both applied
    to the base table of ``be_scenarios``.
    """
    base = be_scenarios.base_table()
    be_path = improvement_path(base, be_scenarios.central(), role="BE")
    scr_q = percentile_table(scr_scenarios, 0.5)
    scr_base = scr_scenarios.base_table()
    scr_path = improvement_path(scr_base, scr_q, role="SCR")
    return build_shocked_tables(be_path, scr_path, base)


class _Run:
    """State shared by the stages of one pipeline run."""

    def __init__(self, config, writer):
        self.config = config
        self.writer = writer
        self.status = {stage: "pending" for stage in STAGES}
        self.notes = {}
        self.surfaces = {}
        self.fits = {}
        self.selection = {}
        self.scenarios = {}

    def stage(self, name, fn):
        logging.info("Stage %s started" % name)
        try:
            fn()
        except Exception as ee:
            logging.error("Stage %s failed: %s" % (name, ee))
            self.status[name] = "failed"
            raise StageError(name, ee) from ee
        if self.status[name] == "pending":
            self.status[name] = "ok"
        logging.info("Stage %s finished (%s)" % (name, self.status[name]))

    def ingest(self):
        self.data = load_inputs(self.config)

    def surface(self):
        config, writer = self.config, self.writer
        crude = calibration_surface(self.data, config)
        self.surfaces["crude"] = crude
        writer.surface("crude", crude)
        writer.grid("crude_improvements.csv", improvement_frame(crude))
        q = close_table(to_q(crude), omega=config.omega, fit_ages=config.closure_fit_ages)
        writer.table("crude_life_expectancy.csv", period_life_expectancy_series(
            q, config.le_age, config.le_truncation or config.age_max + 1).reset_index())

    def correct(self):
        config, writer = self.config, self.writer
        if config.skip_correction:
            self.status["correct"] = "skipped"
            self.notes["correct"] = "correction skipped by configuration"
            return
        crude = self.surfaces["crude"]
        indicator = load_indicator(self.data, config)
        corrected = correct_surface(crude, indicator, pass_through=config.pass_through)
        self.surfaces["corrected"] = corrected
        writer.table("indicator.csv", indicator.to_frame())
        writer.surface("corrected", corrected)
        writer.grid("corrected_improvements.csv", improvement_frame(corrected))
        writer.table("anomaly_report.csv", anomaly_report(crude, corrected))

    def fit(self):
        config, writer = self.config, self.writer
        diagnostics = []
        for dataset, surface in self.surfaces.items():
            for model in config.models:
                params, diag = fit_model(surface, model, dataset=dataset)
                self.fits[(dataset, model)] = (params, diag)
                diagnostics.append(diag)
                writer.fitted("%s_%s" % (dataset, model), params, diag)
        writer.table("bic.csv", bic_table(diagnostics))
        writer.json("fit_diagnostics.json", [d.to_dict() for d in diagnostics])

    def select(self):
        config = self.config
        for dataset, surface in self.surfaces.items():
            fits = [self.fits[(dataset, m)][1] for m in config.models]
            stability = {}
            if config.stability:
                for m in config.models:
                    stability[m] = parameter_stability(surface, self.fits[(dataset, m)][0])
            self.selection[dataset] = select_model(fits, stability, config.selection_weights,
                                                   config.selection_override)
            self.writer.table("%s_selection.csv" % dataset, self.selection[dataset].report)
        summary = {dataset: s.to_dict() for dataset, s in self.selection.items()}
        if "corrected" in self.selection:
            crude_best = self.selection["crude"].best_bic
            corrected_best = self.selection["corrected"].best_bic
            summary["flipped"] = crude_best != corrected_best
            if summary["flipped"]:
                logging.info("Correction changes the best BIC model from %s to %s" % (
                    crude_best.upper(), corrected_best.upper()))
        self.writer.json("selection.json", summary)

    @property
    def model(self):
        dataset = "corrected" if "corrected" in self.selection else "crude"
        return self.selection[dataset].model

    def project(self):
        config, writer = self.config, self.writer
        fans = {}
        for dataset in self.surfaces:
            params = self.fits[(dataset, self.model)][0]
            dynamics, scenarios = project_model(params, config)
            self.scenarios[dataset] = scenarios
            writer.qsurface("%s_central.csv" % dataset, scenarios.central())
            for p in config.percentiles:
                writer.qsurface("%s_percentile_%s.csv" % (dataset, "%g" % p),
                                percentile_table(scenarios, p), percentile=p)
            fans[dataset] = {}
            for kind in ("period", "cohort"):
                try:
                    fan = life_expectancy_fan(scenarios, kind, config.le_age,
                                              config.le_truncation)
                except HorizonError as ee:
                    logging.warning("No %s life expectancy fan: %s" % (kind, ee))
                    continue
                fans[dataset][kind] = fan
                writer.table("%s_%s_le_fan.csv" % (dataset, kind), fan.to_frame())
            overlay(writer, dataset, self.surfaces[dataset], self.model, config)
            writer.json("%s_scenarios.json" % dataset, {
                "summary": scenarios.summary(), "dynamics": dynamics.to_dict(),
                "labelled_defaults": config.labelled_defaults()})
            if config.export_scenarios:
                writer.netcdf("%s_scenarios.nc" % dataset, scenarios)
        if "corrected" in fans:
            for kind in fans["corrected"]:
                if kind in fans["crude"]:
                    writer.table("fan_difference_%s.csv" % kind,
                                 compare_fans(fans["crude"][kind], fans["corrected"][kind]))

    def scr(self):
        config, writer = self.config, self.writer
        if config.portfolio_path:
            portfolio = AnnuityPortfolio.from_csv(config.portfolio_path,
                                                  config.portfolio_config_path)
        else:
            portfolio = AnnuityPortfolio.default(config.gender)
            self.notes["portfolio"] = "default unit portfolio, ages 60 to 90 by 5"
        tables = {}
        crude = self.scenarios["crude"]
        for dataset, scenarios in self.scenarios.items():
            tables[dataset] = shocked_tables(crude, scenarios)
            writer.table("%s_shocked_tables.csv" % dataset, tables[dataset].to_frame())
            writer.table("%s_ie_curve.csv" % dataset, ie_curve(
                tables[dataset], ages=np.arange(config.age_min, config.age_max + 1)))
        report = {"best_estimate": "central projection of the crude calibration"}
        if "corrected" in tables:
            report.update(scr_impact(portfolio, tables["crude"], tables["corrected"]))
        writer.json("scr_impact.json", report)
        if config.stability:
            writer.json("stability.json", self._stability(portfolio, tables))

    def _stability(self, portfolio, tables):
        """Refit on data ending one year earlier and compare the gap
        e_SCR - e_BE between the two valuation years.
        """
        config = self.config
        previous = {}
        for dataset, surface in self.surfaces.items():
            older = surface.subset(years=(surface.years[0], surface.years[-1] - 1))
            params, _ = fit_model(older, self.model, dataset=dataset)
            previous[dataset] = project_model(params, config)[1]
        return stability_report(previous, tables, portfolio, config.stability_weight)


def stability_report(previous, tables, portfolio, weight):
    """Evolution of e_SCR - e_BE between the valuation year of
    ``previous`` (dataset -> ScenarioSet) and that of ``tables``.
    """
    if "crude" not in previous or set(tables) - set(previous):
        raise ValueError("Previous scenarios must cover datasets %s" % sorted(tables))
    out = {}
    for dataset in tables:
        before = shocked_tables(previous["crude"], previous[dataset])
        out[dataset] = stability_indicator(before, tables[dataset], portfolio,
                                           weight=weight)
    return {"evolution_pct": out, "weight": weight}


def improvement_frame(surface):
    matrix = improvements(surface)
    return pd.DataFrame(matrix.r, index=pd.Index(matrix.ages, name="age"),
                        columns=[str(t) for t in matrix.years])


def run_pipeline(config):
    """Run every stage and write the manifest.

    Input
    =====
    config : mortcorr.config.RunConfig
        Effective configuration.

    Returns a PipelineResult. A failing stage leaves a FAILED marker
    and raises StageError.
    """
    inputs = [config.deaths_path, config.population_path, config.portfolio_path,
              config.portfolio_config_path]
    if not config.skip_correction:
        inputs += [config.births_path, config.predicted_indicator_path]
    try:
        writer = ArtifactWriter(config.output_dir, config, [p for p in inputs if p])
    except OSError as ee:
        raise StageError("ingest", ee) from ee
    run = _Run(config, writer)
    try:
        for name in STAGES:
            run.stage(name, getattr(run, name))
    except StageError as ee:
        writer.fail(ee.stage, ee.cause, run.status)
        raise
    failed = writer.path(FAILED)
    if failed.exists():
        failed.unlink()
    writer.manifest(run.status, run.notes)
    return PipelineResult(output_dir=writer.output_dir, status=run.status,
                          artifacts=sorted(writer.artifacts),
                          selection={d: s.model for d, s in run.selection.items()},
                          notes=run.notes)
