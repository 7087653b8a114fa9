#!/usr/bin/env python3
"""
Script to correct period mortality tables for the uniform-births
assumption, fit and project mortality models and measure the impact on
the longevity trend SCR.

License:

This file is part of the mortcorr repository.

mortcorr is licensed under the Apache License 2.0

Usage:
    mortcorr [-h] [--config CONFIG] [--seed SEED] [--out OUT] [--quiet | --verbose]
             {surface,improvements,life-expectancy,correct,regress-indicator,fit,
              project,scr,simulate-oracle,run} ...

Examples:

    # Full workflow with the settings of run.yml
    mortcorr --config run.yml run

    # Synthetic HMD/HFD files from an oracle spec
    mortcorr --out data simulate-oracle oracle.json

    # Reconstruct an indicator from donor countries
    mortcorr --out fit regress-indicator ITAbirthsRR.txt \\
        --donor FRA=FRAbirthsRR.txt --donor ESP=ESPbirthsRR.txt --criterion bic
"""
import json
import logging
import argparse
import sys

import numpy as np

from mortcorr.config import RunConfig
from mortcorr.fertility import anomaly_report, compute_indicator, correct_surface
from mortcorr.forecast import HorizonError, life_expectancy_fan, percentile_table
from mortcorr.hmd import parse_monthly_births, read_surface_bundle
from mortcorr.lexis import close_table, period_life_expectancy_series, to_q
from mortcorr.models import ModelParams, bic_table, fit_model
from mortcorr.oracle import OracleSpec, simulate_population
from mortcorr.pipeline import ArtifactWriter, StageError, calibration_surface, improvement_frame
from mortcorr.pipeline import load_indicator, load_inputs, overlay, project_model, run_pipeline
from mortcorr.pipeline import shocked_tables, stability_report
from mortcorr.regression import DEFAULT_WINDOW, predict, stepwise_select
from mortcorr.scr import AnnuityPortfolio, ie_curve, scr_impact

INPUT_ERROR = 2
NUMERIC_ERROR = 3


def create_parser():
    """Create parser object.
    """
    parser = argparse.ArgumentParser(
        description="Correct period mortality tables for isolated cohort effects and "
                    "measure the impact on the longevity trend SCR."
    )
    parser.add_argument(
        "-c", "--config", type=str, default=None,
        help="YAML file with a flat mapping of run settings."
    )
    parser.add_argument(
        "--seed", type=int, default=None,
        help="Master seed of the scenario generator (overrides the config)."
    )
    parser.add_argument(
        "-o", "--out", type=str, default=None,
        help="Output directory (overrides output_dir of the config)."
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument(
        "-q", "--quiet", action="store_true",
        help="Only log warnings and errors."
    )
    verbosity.add_argument(
        "-v", "--verbose", action="store_true",
        help="Log debug messages."
    )
    parser.add_argument(
        "--log_to_file", action="store_true",
        help="Log to file instead of the console."
    )
    parser.add_argument(
        "--log_file", type=str, default="mortcorr.log",
        help="Log file name."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("surface", help="Build the crude mortality surface.")
    sub.add_parser("improvements", help="Improvement rate matrix of the crude surface.")
    sub.add_parser("life-expectancy", help="Period life expectancy series.")

    correct = sub.add_parser("correct", help="Correct the surface with monthly births.")
    correct.add_argument(
        "--pass-through", action="store_true",
        help="Leave cohorts without indicator uncorrected instead of failing."
    )

    regress = sub.add_parser("regress-indicator",
                             help="Reconstruct an indicator from donor countries.")
    regress.add_argument("target", type=str, help="Monthly births file of the target country.")
    regress.add_argument(
        "--donor", action="append", default=[], metavar="NAME=FILE",
        help="Monthly births file of a donor country (repeatable)."
    )
    regress.add_argument(
        "--criterion", choices=("adjr2", "bic"), default="adjr2",
        help="Subset selection criterion."
    )
    regress.add_argument(
        "--window", type=int, nargs=2, default=list(DEFAULT_WINDOW), metavar=("FIRST", "LAST"),
        help="Inclusive fit window of birth years."
    )
    regress.add_argument(
        "--predict", type=int, nargs=2, default=None, metavar=("FIRST", "LAST"),
        help="Birth years to predict (default: every donor year)."
    )

    fit = sub.add_parser("fit", help="Fit models on a surface bundle.")
    fit.add_argument("surface", type=str, help="Prefix of a surface bundle (<prefix>_deaths.csv).")
    fit.add_argument("--models", nargs="+", default=None, help="Models to fit.")

    project = sub.add_parser("project", help="Project fitted parameters.")
    project.add_argument("params", type=str, help="Parameter JSON written by fit.")
    project.add_argument("--scenarios", type=int, default=None, help="Number of scenarios.")
    project.add_argument("--horizon", type=int, default=None, help="Projection years.")
    project.add_argument("--percentiles", type=float, nargs="+", default=None,
                         help="Percentile tables to write.")
    project.add_argument("--export-scenarios", action="store_true",
                         help="Also write the scenario cube as netCDF.")
    project.add_argument("--surface", type=str, default=None, metavar="PREFIX",
                         help="Surface bundle the parameters were fitted on; writes the "
                              "historical overlay.")
    project.add_argument("--holdout", type=int, default=None,
                         help="Years held out for the historical overlay.")

    scr = sub.add_parser("scr", help="Shocked tables, IE curve and SCR impact.")
    scr.add_argument("crude", type=str, help="Parameter JSON of the crude calibration.")
    scr.add_argument("corrected", type=str, nargs="?", default=None,
                     help="Parameter JSON of the corrected calibration.")
    scr.add_argument(
        "--previous", nargs="+", default=None, metavar="PARAMS",
        help="Parameter JSON fitted on data ending one year earlier, in the order "
             "crude [corrected]; writes the stability indicator."
    )

    oracle = sub.add_parser("simulate-oracle", help="Write synthetic HMD/HFD files.")
    oracle.add_argument("spec", type=str, help="Oracle spec (JSON).")

    sub.add_parser("run", help="Run the full pipeline.")

    return parser


def configure_logging(args):
    level = logging.INFO
    if args.quiet:
        level = logging.WARNING
    elif args.verbose:
        level = logging.DEBUG
    if args.log_to_file:
        logging.basicConfig(filename=args.log_file, level=level)
    else:
        logging.basicConfig(level=level)


def load_config(args):
    overrides = {"seed": args.seed, "output_dir": args.out}
    if args.config:
        return RunConfig.from_yaml(args.config, **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _read_params(filename):
    with open(filename) as fp:
        doc = json.load(fp)
    return ModelParams.from_dict(doc.get("content", doc))


def surface(args, config):
    writer = ArtifactWriter(config.output_dir, config, [config.deaths_path,
                                                        config.population_path])
    crude = calibration_surface(load_inputs(config), config)
    writer.surface("crude", crude)
    return writer, crude


def improvements(args, config):
    writer, crude = surface(args, config)
    writer.grid("crude_improvements.csv", improvement_frame(crude))


def life_expectancy(args, config):
    writer, crude = surface(args, config)
    q = close_table(to_q(crude), omega=config.omega, fit_ages=config.closure_fit_ages)
    writer.table("crude_life_expectancy.csv", period_life_expectancy_series(
        q, config.le_age, config.le_truncation or config.age_max + 1).reset_index())


def correct(args, config):
    if args.pass_through:
        config.pass_through = True
    data = load_inputs(config)
    writer = ArtifactWriter(config.output_dir, config, [
        config.deaths_path, config.population_path, config.births_path,
        config.predicted_indicator_path])
    crude = calibration_surface(data, config)
    indicator = load_indicator(data, config)
    corrected = correct_surface(crude, indicator, pass_through=config.pass_through)
    writer.table("indicator.csv", indicator.to_frame())
    writer.surface("corrected", corrected)
    writer.grid("corrected_improvements.csv", improvement_frame(corrected))
    writer.table("anomaly_report.csv", anomaly_report(crude, corrected))


def regress_indicator(args, config):
    target = parse_monthly_births(args.target)
    donors = {}
    inputs = [args.target]
    for item in args.donor:
        name, sep, filename = item.partition("=")
        if not sep:
            raise ValueError("Donor must be given as NAME=FILE, got %r" % item)
        donors[name] = compute_indicator(parse_monthly_births(filename),
                                         weights=config.month_weights)
        inputs.append(filename)
    writer = ArtifactWriter(config.output_dir, config, inputs)
    fit = stepwise_select(compute_indicator(target, weights=config.month_weights), donors,
                          window=tuple(args.window), criterion=args.criterion)
    if args.predict:
        years = range(args.predict[0], args.predict[1] + 1)
    else:
        years = sorted(set().union(*[d.cohorts for d in donors.values()]))
    predicted = predict(fit, donors, years)
    writer.json("regression.json", {**fit.to_dict(), "omitted": predicted.omitted})
    writer.table("regression_candidates.csv", fit.candidates)
    writer.table("predicted_indicator.csv",
                 predicted.to_indicator(country=target.country).to_frame())


def fit(args, config):
    surface = read_surface_bundle(args.surface)
    writer = ArtifactWriter(config.output_dir, config, [args.surface + "_deaths.csv",
                                                        args.surface + "_exposure.csv"])
    diagnostics = []
    for model in args.models or config.models:
        params, diag = fit_model(surface, model, dataset=surface.source)
        diagnostics.append(diag)
        writer.fitted("%s_%s" % (surface.source, model), params, diag)
    writer.table("bic.csv", bic_table(diagnostics))
    writer.json("fit_diagnostics.json", [d.to_dict() for d in diagnostics])


def project(args, config):
    for key in ("scenarios", "horizon", "percentiles", "holdout"):
        value = getattr(args, key)
        if value is not None:
            setattr(config, "n_scenarios" if key == "scenarios" else key, value)
    if args.export_scenarios:
        config.export_scenarios = True
    config.validate()
    params = _read_params(args.params)
    inputs = [args.params]
    if args.surface:
        inputs += [args.surface + "_deaths.csv", args.surface + "_exposure.csv"]
    writer = ArtifactWriter(config.output_dir, config, inputs)
    dynamics, scenarios = project_model(params, config)
    writer.qsurface("%s_central.csv" % params.source, scenarios.central())
    for p in config.percentiles:
        writer.qsurface("%s_percentile_%s.csv" % (params.source, "%g" % p),
                        percentile_table(scenarios, p), percentile=p)
    for kind in ("period", "cohort"):
        try:
            fan = life_expectancy_fan(scenarios, kind, config.le_age, config.le_truncation)
        except HorizonError as ee:
            logging.warning("No %s life expectancy fan: %s" % (kind, ee))
            continue
        writer.table("%s_%s_le_fan.csv" % (params.source, kind), fan.to_frame())
    if args.surface:
        overlay(writer, params.source, read_surface_bundle(args.surface), params.model, config)
    writer.json("%s_scenarios.json" % params.source, {"summary": scenarios.summary(),
                                                      "dynamics": dynamics.to_dict()})
    if config.export_scenarios:
        writer.netcdf("%s_scenarios.nc" % params.source, scenarios)


def scr(args, config):
    current = [p for p in (args.crude, args.corrected) if p]
    if args.previous is not None and len(args.previous) != len(current):
        raise ValueError("--previous needs %d parameter files, got %d" %
                         (len(current), len(args.previous)))
    inputs = current + (args.previous or []) + [config.portfolio_path,
                                                 config.portfolio_config_path]
    writer = ArtifactWriter(config.output_dir, config, [p for p in inputs if p])
    if config.portfolio_path:
        portfolio = AnnuityPortfolio.from_csv(config.portfolio_path,
                                              config.portfolio_config_path)
    else:
        portfolio = AnnuityPortfolio.default(config.gender)
    scenarios = {"crude": project_model(_read_params(args.crude), config)[1]}
    if args.corrected:
        scenarios["corrected"] = project_model(_read_params(args.corrected), config)[1]
    tables = {}
    for dataset, cube in scenarios.items():
        tables[dataset] = shocked_tables(scenarios["crude"], cube)
        writer.table("%s_shocked_tables.csv" % dataset, tables[dataset].to_frame())
        writer.table("%s_ie_curve.csv" % dataset, ie_curve(
            tables[dataset], ages=np.arange(config.age_min, config.age_max + 1)))
    if "corrected" in tables:
        writer.json("scr_impact.json", scr_impact(portfolio, tables["crude"],
                                                  tables["corrected"]))
    if args.previous:
        previous = {dataset: project_model(_read_params(filename), config)[1]
                    for dataset, filename in zip(scenarios, args.previous)}
        writer.json("stability.json", stability_report(previous, tables, portfolio,
                                                       config.stability_weight))
    elif config.stability:
        logging.warning("No --previous parameters given, stability indicator skipped")


def simulate_oracle(args, config):
    spec = OracleSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    output = simulate_population(spec)
    output.check_accounting()
    writer = ArtifactWriter(config.output_dir, config, [args.spec])
    for path in output.write(str(writer.output_dir)).values():
        writer.record([path])
    writer.manifest({"simulate-oracle": "ok"})


def run(args, config):
    result = run_pipeline(config)
    logging.info("Selected model: %s" % result.selection)


COMMANDS = {
    "surface": surface,
    "improvements": improvements,
    "life-expectancy": life_expectancy,
    "correct": correct,
    "regress-indicator": regress_indicator,
    "fit": fit,
    "project": project,
    "scr": scr,
    "simulate-oracle": simulate_oracle,
    "run": run,
}


def exit_code(error):
    if isinstance(error, StageError):
        error = error.cause
    if isinstance(error, (ArithmeticError, np.linalg.LinAlgError)):
        return NUMERIC_ERROR
    return INPUT_ERROR


def main(args=None):
    configure_logging(args)
    try:
        config = load_config(args)
        COMMANDS[args.command](args, config)
    except (ValueError, OSError, ArithmeticError, np.linalg.LinAlgError, StageError) as ee:
        logging.error("%s failed: %s" % (args.command, ee))
        return exit_code(ee)
    return 0


def _main():  # pragma: no cover
    sys.exit(main(create_parser().parse_args()))  # entry point in pyproject.toml


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main(create_parser().parse_args()))
