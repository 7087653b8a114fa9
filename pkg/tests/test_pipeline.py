import os
import json
import pytest

import numpy as np

from mortcorr.config import RunConfig
from mortcorr.hmd import read_metadata
from mortcorr.hmd import read_surface_bundle
from mortcorr.hmd import read_table
from mortcorr.models import FitDiagnostics
from mortcorr.pipeline import FAILED
from mortcorr.pipeline import MANIFEST
from mortcorr.pipeline import SelectionError
from mortcorr.pipeline import StageError
from mortcorr.pipeline import run_pipeline
from mortcorr.pipeline import select_model
from mortcorr.pipeline import sha256_file


def _config(oracle_files, output_dir, **changes):
    settings = dict(
        deaths_path=oracle_files["deaths"],
        population_path=oracle_files["population"],
        births_path=oracle_files["births"],
        age_min=60, age_max=80, omega=100, calibration_years=15, closure_fit_ages=15,
        models=["m1", "m5"], n_scenarios=50, horizon=40, seed=5, stability=False, holdout=5,
        output_dir=output_dir,
    )
    settings.update(changes)
    return RunConfig(**settings)


def _diag(model, bic, residuals):
    return FitDiagnostics(model=model, dataset="crude", loglik=bic, k=1, n=1, bic=bic,
                          residuals=residuals)


@pytest.mark.mortcorr
def testPipeline_select_model():
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(10, 12))
    blocks = np.where(np.arange(10)[:, None] < 5, 1., -1.) * np.ones((10, 12))
    fits = [_diag("m1", -100., blocks), _diag("m5", -120., noise)]

    selection = select_model(fits)
    assert selection.model == "m1"
    assert selection.best_bic == "m1"
    assert selection.report.selected.tolist() == [True, False]

    # Residual randomness outweighs BIC
    selection = select_model(fits, weights={"bic": 1., "runs": 2.})
    assert selection.model == "m5"
    assert selection.best_bic == "m1"

    stability = {"m1": {"window": 0.5, "age_band": 0.2}, "m5": {"window": 0.01, "age_band": 0.02}}
    selection = select_model(fits, stability, weights={"bic": 1., "stability": 2.})
    assert selection.model == "m5"
    assert selection.report.stability_window.tolist() == [0.5, 0.01]

    selection = select_model(fits, override="m5")
    assert selection.model == "m5"
    assert selection.override == "m5"
    assert selection.to_dict()["best_bic"] == "m1"
    with pytest.raises(SelectionError):
        select_model(fits, override="m3")
    with pytest.raises(SelectionError):
        select_model([])


@pytest.mark.mortcorr
def testPipeline_run(oracle_files, tmpDir):
    """End-to-end run on the oracle files."""
    out = os.path.join(tmpDir, "run")
    result = run_pipeline(_config(oracle_files, out))
    assert all(state == "ok" for state in result.status.values())
    assert set(result.selection) == {"crude", "corrected"}
    assert not os.path.exists(os.path.join(out, FAILED))

    with open(result.manifest) as fp:
        manifest = json.load(fp)
    paths = {entry["path"]: entry["sha256"] for entry in manifest["artifacts"]}
    for name in ("crude_rates.csv", "corrected_rates.csv", "indicator.csv", "anomaly_report.csv",
                 "bic.csv", "selection.json", "crude_central.csv",
                 "corrected_percentile_0.5.csv", "crude_period_le_fan.csv",
                 "fan_difference_period.csv", "corrected_shocked_tables.csv",
                 "corrected_ie_curve.csv", "scr_impact.json", "crude_m1_beta1.csv",
                 "crude_m1_kappa1.csv", "corrected_m5_kappa2.csv", "crude_m5_residuals.csv",
                 "crude_historical_overlay.csv", "corrected_historical_overlay.csv"):
        assert name in paths
        assert paths[name] == sha256_file(os.path.join(out, name))
    assert manifest["metadata"]["seed"] == 5
    assert manifest["notes"]["portfolio"].startswith("default")

    crude = read_surface_bundle(os.path.join(out, "crude"))
    assert crude.shape == (21, 15)
    np.testing.assert_array_equal(crude.years, np.arange(1996, 2011))
    metadata = read_metadata(os.path.join(out, "crude_rates.csv"))
    assert metadata["config_digest"] == _config(oracle_files, out).digest()

    indicator, _ = read_table(os.path.join(out, "indicator.csv"))
    row = indicator.set_index("cohort").loc[1919]
    assert row.indicator < 0.8
    assert row.provenance == "computed"

    with open(os.path.join(out, "scr_impact.json")) as fp:
        impact = json.load(fp)["content"]
    assert impact["best_estimate"].startswith("central projection")
    assert np.isfinite(impact["scr_crude"]) and impact["scr_crude"] > 0.

    tables, _ = read_table(os.path.join(out, "crude_shocked_tables.csv"))
    assert (tables.q_scr <= tables.q_be + 1e-12).mean() > 0.9

    beta1, _ = read_table(os.path.join(out, "crude_m1_beta1.csv"), index_col=0)
    assert beta1.index.tolist() == list(range(60, 81))
    residuals, _ = read_table(os.path.join(out, "crude_m1_residuals.csv"), index_col=0)
    assert residuals.shape == (21, 15)
    overlay, _ = read_table(os.path.join(out, "crude_historical_overlay.csv"))
    assert overlay.columns.tolist() == ["age", "projected", "realised", "difference"]
    assert overlay.age.tolist() == list(range(60, 81))
    np.testing.assert_allclose(overlay.difference, overlay.projected - overlay.realised,
                               atol=1e-6)


@pytest.mark.mortcorr
def testPipeline_overlay_window(oracle_files, tmpDir, caplog):
    """A hold-out that leaves fewer than ten fit years only warns."""
    out = os.path.join(tmpDir, "overlay")
    result = run_pipeline(_config(oracle_files, out, models=["m5"], n_scenarios=10,
                                  skip_correction=True, births_path=None, holdout=6))
    assert result.status["project"] == "ok"
    assert "No historical overlay for crude" in caplog.text
    assert not os.path.exists(os.path.join(out, "crude_historical_overlay.csv"))


@pytest.mark.mortcorr
def testPipeline_determinism(oracle_files, tmpDir):
    """Same inputs, config and seed give byte-identical artifacts."""
    runs = []
    for name in ("first", "second"):
        result = run_pipeline(_config(oracle_files, os.path.join(tmpDir, "twice", name),
                                      models=["m1"], n_scenarios=20))
        runs.append(result)
    first, second = runs
    assert first.artifacts == second.artifacts
    assert "crude_central.csv" in first.artifacts
    for name in first.artifacts:
        assert (first.output_dir / name).read_bytes() == (second.output_dir / name).read_bytes()

    # The manifests only differ by the output directory
    manifests = []
    for result in runs:
        with open(result.manifest) as fp:
            manifest = json.load(fp)
        assert manifest["config"].pop("output_dir").endswith(result.output_dir.name)
        manifests.append(manifest)
    assert manifests[0] == manifests[1]


@pytest.mark.mortcorr
def testPipeline_skip_correction(oracle_files, tmpDir):
    out = os.path.join(tmpDir, "skip")
    result = run_pipeline(_config(oracle_files, out, models=["m5"], n_scenarios=10,
                                  births_path=None, skip_correction=True))
    assert result.status["correct"] == "skipped"
    assert set(result.selection) == {"crude"}
    assert not os.path.exists(os.path.join(out, "corrected_rates.csv"))
    with open(os.path.join(out, "scr_impact.json")) as fp:
        assert "scr_crude" not in json.load(fp)["content"]


@pytest.mark.mortcorr
def testPipeline_failure_marker(oracle_files, tmpDir):
    """A failing stage keeps earlier artifacts and leaves a marker."""
    out = os.path.join(tmpDir, "failed")
    with pytest.raises(StageError) as ee:
        run_pipeline(_config(oracle_files, out, births_path=None))
    assert ee.value.stage == "correct"
    assert os.path.exists(os.path.join(out, FAILED))
    assert os.path.exists(os.path.join(out, "crude_rates.csv"))
    with open(os.path.join(out, MANIFEST)) as fp:
        manifest = json.load(fp)
    assert manifest["stages"]["surface"] == "ok"
    assert manifest["stages"]["correct"] == "failed"
    assert manifest["stages"]["fit"] == "pending"
    assert manifest["notes"]["failed_stage"] == "correct"

    with pytest.raises(StageError) as ee:
        run_pipeline(_config(oracle_files, os.path.join(tmpDir, "missing"),
                             deaths_path=os.path.join(tmpDir, "nowhere.txt")))
    assert ee.value.stage == "ingest"


@pytest.mark.mortcorr
@pytest.mark.slow
def testPipeline_run_all_models(oracle_files, tmpDir):
    """All three models with parameter stability and the SCR stability
    indicator.
    """
    out = os.path.join(tmpDir, "full")
    result = run_pipeline(_config(oracle_files, out, models=["m1", "m3", "m5"],
                                  n_scenarios=200, stability=True,
                                  selection_weights={"bic": 1., "runs": 1., "stability": 1.}))
    assert all(state == "ok" for state in result.status.values())
    selection, _ = read_table(os.path.join(out, "crude_selection.csv"))
    assert sorted(selection.model) == ["m1", "m3", "m5"]
    assert selection.stability_window.notna().all()
    with open(os.path.join(out, "stability.json")) as fp:
        stability = json.load(fp)["content"]
    assert set(stability["evolution_pct"]) == {"crude", "corrected"}


@pytest.mark.realdata
def testPipeline_real_data(hmdDir, tmpDir):
    """Run on genuine files named FRATNP.Deaths_lexis.txt,
    FRATNP.Population.txt and FRAbirthsRR.txt.
    """
    config = RunConfig(deaths_path=os.path.join(hmdDir, "FRATNP.Deaths_lexis.txt"),
                       population_path=os.path.join(hmdDir, "FRATNP.Population.txt"),
                       births_path=os.path.join(hmdDir, "FRAbirthsRR.txt"),
                       n_scenarios=500, pass_through=True, stability=False,
                       output_dir=os.path.join(tmpDir, "real"))
    result = run_pipeline(config)
    report, _ = read_table(os.path.join(result.output_dir, "anomaly_report.csv"))
    flagged = set(report.cohort[report.flagged])
    assert flagged & {1915, 1919, 1920, 1940}
